"""Discrete-event backend.

Everything runs on one :class:`SimClock`; pilots, coordinators and workers
are plain objects whose methods are scheduled as clock actions.  Workers do
not execute payloads: a task ends at ``start + duration``, or at ``start +
timeout`` as FAILED when its duration exceeds the timeout.  Results reach the
coordinator the instant a task ends, and a worker re-advertises the freed
slots at the same instant.

Tasks are identified by their integer index in the workload; the event log
names them ``t0000042``.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .config import ExperimentConfig, SimTiming
from .coordinator import Coordinator, JoinSummary, PlacementError, stride
from .events import EventLog
from .model import TaskState
from .resources import NodePool
from .scheduler import AgentScheduler
from .simclock import SimClock
from .workload import Workload, generate_workload

_DONE = TaskState.DONE.value
_FAILED = TaskState.FAILED.value
_CANCELED = TaskState.CANCELED.value
_KIND = ("EXECUTABLE", "FUNCTION")


class SimWorker:
    __slots__ = ("wid", "node", "cores", "gpus", "free_cores", "free_gpus", "running",
                 "started")

    def __init__(self, wid: str, node: Optional[int], cores: int, gpus: int):
        self.wid = wid
        self.node = node
        self.cores = cores
        self.gpus = gpus
        self.free_cores = cores
        self.free_gpus = gpus
        self.running: Dict[int, float] = {}
        self.started = False


@dataclass
class PilotRun:
    index: int
    desc: object
    tasks: Sequence[int]
    pool: Optional[NodePool] = None
    scheduler: Optional[AgentScheduler] = None
    coordinators: List[Coordinator] = field(default_factory=list)
    workers: Dict[str, SimWorker] = field(default_factory=dict)
    agent_uids: Dict[str, int] = field(default_factory=dict)
    agent_states: Dict[str, int] = field(default_factory=dict)
    done: bool = False
    walltime_hit: bool = False


@dataclass
class SimOutcome:
    summaries: Dict[str, JoinSummary]
    pools: List[NodePool]
    walltime_hit: Dict[str, bool]
    errors: List[str]
    oversubscriptions: int
    t_end: float

    @property
    def clean(self) -> bool:
        return (not self.errors and not any(self.walltime_hit.values())
                and all(s.conserved for s in self.summaries.values()))


class Simulation:
    def __init__(self, cfg: ExperimentConfig, workload: Optional[Workload] = None,
                 log: Optional[EventLog] = None):
        self.cfg = cfg
        self.timing: SimTiming = cfg.timing
        self.clock = SimClock()
        self.log = log if log is not None else EventLog()
        self.emit = self.log.emit
        self.workload = workload if workload is not None else generate_workload(cfg.workload)
        w = self.workload
        self._dur = w.durations.tolist()
        self._fn = w.is_function.tolist()
        self._timeouts = (w.timeouts[1], w.timeouts[0])
        self._demand = (w.spec.cores_per_task, w.spec.gpus_per_task)
        n_p = len(cfg.pilots)
        self.runs = [PilotRun(j, p, range(j, len(w), n_p)) for j, p in enumerate(cfg.pilots)]
        self.errors: List[str] = []

    def now(self) -> float:
        return self.clock.now

    # -- pilot lifecycle ----------------------------------------------------

    def run(self) -> SimOutcome:
        for r in self.runs:
            self.clock.schedule(r.desc.available_at_s, self._pilot_active, r)
        self.clock.run()
        self.log.flush()
        summaries = {}
        for r in self.runs:
            for c in r.coordinators:
                summaries[c.coordinator_id] = c.summary(r.walltime_hit)
            if not r.coordinators and r.scheduler is not None:
                summaries[r.desc.pilot_id] = JoinSummary(
                    *self._agent_counts(r), r.walltime_hit)
        over = sum(r.scheduler.slots.oversubscriptions for r in self.runs if r.scheduler)
        return SimOutcome(summaries, [r.pool for r in self.runs if r.pool is not None],
                          {r.desc.pilot_id: r.walltime_hit for r in self.runs},
                          list(self.errors), over,
                          max((r.pool.t_end for r in self.runs if r.pool is not None), default=0.0))

    def _pilot_active(self, r: PilotRun) -> None:
        p, t, tm = r.desc, self.clock.now, self.timing
        r.pool = NodePool.build(p, t)
        r.scheduler = AgentScheduler(r.pool, emit=self.emit, clock=self.now)
        self.emit(t, "pilot", p.pilot_id, "pilot_active",
                  {"nodes": p.n_nodes, "cores_per_node": p.cores_per_node,
                   "gpus_per_node": p.gpus_per_node, "walltime_s": p.walltime_s})
        self.clock.schedule(t + tm.bootstrap_s, self._mark, "pilot", p.pilot_id, "bootstrap_done")
        self.clock.schedule(t + tm.staging_s, self._mark, "pilot", p.pilot_id, "staging_done")
        self.clock.schedule(r.pool.t_deadline, self._walltime, r)
        self.clock.schedule(t + max(tm.bootstrap_s, tm.staging_s), self._agent_ready, r)

    def _mark(self, kind, eid, event, attrs=None) -> None:
        self.emit(self.clock.now, kind, eid, event, attrs)

    def _agent_ready(self, r: PilotRun) -> None:
        if r.done:
            return
        coords = self.cfg.coordinators_of(r.desc.pilot_id)
        if not coords:
            self._agent_submit(r)
            return
        for k, cc in enumerate(coords):
            cid = f"{r.desc.pilot_id}.c{k}"
            c = Coordinator(cid, cc, r.scheduler, self.emit, self.now,
                            key=int, demand=self._demand_of, pilot_id=r.desc.pilot_id)
            r.coordinators.append(c)
            self.clock.after(self.timing.coordinator_startup_s, self._coord_start, r, c, k)

    def _demand_of(self, i: int):
        return self._demand

    def _pilot_done(self, r: PilotRun) -> None:
        if r.done:
            return
        r.done = True
        t = self.clock.now
        r.pool.t_released = t
        self.emit(t, "pilot", r.desc.pilot_id, "pilot_done",
                  {"walltime_hit": int(r.walltime_hit)})

    def _walltime(self, r: PilotRun) -> None:
        """Deadline: whatever still runs is canceled, queued work too."""
        if r.done:
            return
        r.walltime_hit = True
        t = self.clock.now
        if not r.coordinators:
            for uid in sorted(r.scheduler.slots.allocations):
                self.emit(t, "task", uid, "task_end", {"state": _CANCELED})
                r.scheduler.release(uid)
            for uid, _, _ in r.scheduler.waiting:
                self.emit(t, "task", uid, "task_end", {"state": _CANCELED, "reason": "stopped"})
            r.scheduler.waiting.clear()
            self._pilot_done(r)
            return
        for c in r.coordinators:
            if c.stopped:
                continue
            for wid in c.worker_ids():
                w = r.workers.get(wid)
                if w is None:
                    continue
                for i in sorted(w.running):
                    self.emit(t, "task", f"t{i:07d}", "task_end", {"state": _CANCELED})
                    c.complete(wid, i, TaskState.CANCELED)
                w.running.clear()
            self._coord_stop(r, c)
        self._pilot_done(r)

    # -- coordinator --------------------------------------------------------

    def _coord_start(self, r: PilotRun, c: Coordinator, k: int) -> None:
        if r.done:
            return
        try:
            c.start()
        except PlacementError as e:
            self.errors.append(f"{c.coordinator_id}: {e}")
            c.stopped = True
            if all(x.stopped for x in r.coordinators):
                self._pilot_done(r)
            return
        for e in c.worker_table.values():
            r.workers[e.worker_id] = SimWorker(e.worker_id, e.node_id, e.cores, e.gpus)
        self.clock.after(self.timing.preprocess_s, self._coord_ready, r, c, k)

    def _coord_ready(self, r: PilotRun, c: Coordinator, k: int) -> None:
        if c.stopped:
            return
        t = self.clock.now
        self.emit(t, "coordinator", c.coordinator_id, "coord_ready", None)
        c.submit(stride(r.tasks, k, len(r.coordinators)), validate=False)
        if c.idle:
            self._coord_stop(r, c)
            return
        tm = self.timing
        ids = c.worker_ids()
        n = len(ids)
        for i, wid in enumerate(ids):
            dt = tm.worker_launch_first_s + (tm.worker_launch_spread_s * i / (n - 1) if n > 1 else 0.0)
            self.clock.schedule(t + dt, self._worker_start, r, c, r.workers[wid])

    def _coord_stop(self, r: PilotRun, c: Coordinator) -> None:
        t = self.clock.now
        for wid in c.worker_ids():
            w = r.workers.get(wid)
            if w is not None and w.started:
                self.emit(t, "worker", wid, "drain", None)
                self.emit(t, "worker", wid, "shutdown", None)
        c.begin_stop()
        c.finish_stop()
        if all(x.stopped for x in r.coordinators):
            self._pilot_done(r)

    def _dispatch(self, r: PilotRun, c: Coordinator) -> None:
        lat = self.timing.dispatch_latency_s
        for wid, bulk in c.assign():
            if lat:
                self.clock.after(lat, self._deliver, r, c, r.workers[wid], bulk)
            else:
                self._deliver(r, c, r.workers[wid], bulk)

    # -- worker -------------------------------------------------------------

    def _worker_start(self, r: PilotRun, c: Coordinator, w: SimWorker) -> None:
        if c.stopped:
            return
        w.started = True
        self.emit(self.clock.now, "worker", w.wid, "worker_start",
                  {"node": w.node, "cores": w.cores, "gpus": w.gpus, "pilot": r.desc.pilot_id})
        c.register(w.wid, w.node, w.cores, w.gpus)
        c.grant(w.wid, w.cores, w.gpus)
        self._dispatch(r, c)

    def _deliver(self, r: PilotRun, c: Coordinator, w: SimWorker, bulk: List[int]) -> None:
        if c.stopped:
            return
        t = self.clock.now
        emit = self.emit
        schedule = self.clock.schedule
        dur, fn, timeouts = self._dur, self._fn, self._timeouts
        cores, gpus = self._demand
        pid = r.desc.pilot_id
        attrs_f = {"kind": "FUNCTION", "cores": cores, "gpus": gpus, "pilot": pid, "worker": w.wid}
        attrs_e = dict(attrs_f, kind="EXECUTABLE")
        for i in bulk:
            w.free_cores -= cores
            w.free_gpus -= gpus
            if w.free_cores < 0 or w.free_gpus < 0:
                raise AssertionError(f"{w.wid} oversubscribed")
            is_fn = fn[i]
            emit(t, "task", f"t{i:07d}", "task_start", attrs_f if is_fn else attrs_e)
            d = dur[i]
            to = timeouts[is_fn]
            if to is not None and d > to:
                end, state = t + to, _FAILED
            else:
                end, state = t + d, _DONE
            w.running[i] = t
            schedule(end, self._task_end, r, c, w, i, state)

    def _task_end(self, r: PilotRun, c: Coordinator, w: SimWorker, i: int, state: str) -> None:
        if w.running.pop(i, None) is None:
            return
        self.emit(self.clock.now, "task", f"t{i:07d}", "task_end", {"state": state})
        cores, gpus = self._demand
        w.free_cores += cores
        w.free_gpus += gpus
        c.complete(w.wid, i, TaskState(state))
        c.grant(w.wid, cores, gpus)
        if c.pending:
            self._dispatch(r, c)
        elif c.idle:
            self._coord_stop(r, c)

    # -- agent-only pilots --------------------------------------------------

    def _agent_submit(self, r: PilotRun) -> None:
        t = self.clock.now
        cores, gpus = self._demand
        for i in r.tasks:
            uid = f"t{i:07d}"
            r.agent_uids[uid] = i
            self.emit(t, "task", uid, "task_submit", {"pilot": r.desc.pilot_id})
            r.scheduler.submit((uid, cores, gpus))
        self._agent_schedule(r)
        if not r.scheduler.waiting and not r.scheduler.slots.allocations:
            self._pilot_done(r)

    def _agent_schedule(self, r: PilotRun) -> None:
        t = self.clock.now
        pid = r.desc.pilot_id
        for p in r.scheduler.schedule():
            i = r.agent_uids[p.task_uid]
            is_fn = self._fn[i]
            self.emit(t, "task", p.task_uid, "task_start",
                      {"kind": _KIND[is_fn], "cores": p.cores, "gpus": p.gpus, "pilot": pid,
                       "worker": f"{pid}.agent"})
            d = self._dur[i]
            to = self._timeouts[is_fn]
            if to is not None and d > to:
                end, state = t + to, _FAILED
            else:
                end, state = t + d, _DONE
            self.clock.schedule(end, self._agent_task_end, r, p.task_uid, state)

    def _agent_task_end(self, r: PilotRun, uid: str, state: str) -> None:
        if r.done or uid not in r.scheduler.slots.allocations:
            return
        self.emit(self.clock.now, "task", uid, "task_end", {"state": state})
        r.scheduler.release(uid)
        r.agent_states[state] = r.agent_states.get(state, 0) + 1
        self._agent_schedule(r)
        if not r.scheduler.waiting and not r.scheduler.slots.allocations:
            self._pilot_done(r)

    def _agent_counts(self, r: PilotRun):
        n = len(r.tasks)
        d, f = r.agent_states.get(_DONE, 0), r.agent_states.get(_FAILED, 0)
        return d, f, n - d - f, n


def simulate(cfg: ExperimentConfig, log: Optional[EventLog] = None,
             workload: Optional[Workload] = None) -> SimOutcome:
    return Simulation(cfg, workload, log).run()


def static_round_robin_makespan(durations: Sequence[float], m: int) -> float:
    """Task i pre-assigned to worker i mod m; each worker runs its share back to back."""
    d = np.asarray(durations, dtype=np.float64)
    if d.size == 0:
        return 0.0
    loads = np.zeros(m)
    np.add.at(loads, np.arange(d.size) % m, d)
    return float(loads.max())


def greedy_makespan(durations: Sequence[float], m: int) -> float:
    """List scheduling: each task in order goes to the earliest-free worker."""
    free = [0.0] * m
    for x in durations:
        t = heapq.heappop(free)
        heapq.heappush(free, t + float(x))
    return max(free)
