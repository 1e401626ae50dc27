"""Workload owner: places workers, feeds them bulks under credit-based pull.

:class:`Coordinator` holds no transport.  The LOCAL backend wraps it with
sockets (:mod:`pilotfarm.local`), the SIM backend drives it from the event
clock (:mod:`pilotfarm.simulate`).  Both see the same bookkeeping:

* a task is in exactly one of ``pending``, a worker's ``outstanding`` or
  ``completed``;
* a worker is never sent more task cores (GPUs) than it has been granted;
* a task is sent at most once.  If its worker is lost the task fails.
"""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from operator import attrgetter
from typing import Any, Callable, Deque, Dict, Hashable, Iterable, List, Optional, Sequence, Tuple

from .model import (CoordinatorConfig, TaskDescription, TaskKind, TaskState,
                    ValidationError, validate_task)
from .protocol import Message, task_bulk
from .scheduler import AgentScheduler, Placement


class PlacementError(RuntimeError):
    pass


class WorkerLost(RuntimeError):
    pass


class WorkerState(str, Enum):
    LAUNCHING = "LAUNCHING"
    ACTIVE = "ACTIVE"
    DRAINING = "DRAINING"
    DONE = "DONE"
    LOST = "LOST"


@dataclass
class WorkerEntry:
    worker_id: str
    node_id: Optional[int] = None
    state: WorkerState = WorkerState.LAUNCHING
    cores: int = 0
    gpus: int = 0
    credit_cores: int = 0
    credit_gpus: int = 0
    granted_cores: int = 0
    granted_gpus: int = 0
    outstanding: Dict[Hashable, Any] = field(default_factory=dict)
    in_ready: bool = False

    @property
    def tasks_outstanding(self) -> int:
        return len(self.outstanding)


@dataclass(frozen=True)
class JoinSummary:
    done: int
    failed: int
    canceled: int
    submitted: int
    walltime_hit: bool = False

    @property
    def conserved(self) -> bool:
        return self.done + self.failed + self.canceled == self.submitted


def stride(items: Sequence, k: int, n: int) -> Sequence:
    """Coordinator ``k`` of ``n`` takes the items whose index mod n == k."""
    if not 0 <= k < n:
        raise ValueError(f"stride index {k} outside [0, {n})")
    return items[k::n]


def _task_demand(t: TaskDescription) -> Tuple[int, int]:
    return t.cores, t.gpus


class Coordinator:
    """Coordinator bookkeeping, independent of how messages travel.

    ``key`` and ``demand`` let the simulator use bare task indices instead of
    :class:`TaskDescription` objects; by default tasks are keyed by ``uid``
    and demand ``(cores, gpus)``.
    """

    def __init__(self, coordinator_id: str, config: CoordinatorConfig,
                 scheduler: Optional[AgentScheduler] = None,
                 emit: Optional[Callable] = None,
                 clock: Callable[[], float] = lambda: 0.0,
                 key: Optional[Callable[[Any], Hashable]] = None,
                 demand: Optional[Callable[[Any], Tuple[int, int]]] = None,
                 registry=None, pilot_id: str = ""):
        config.validate()
        self.coordinator_id = coordinator_id
        self.config = config
        self.scheduler = scheduler
        self.pilot_id = pilot_id
        self._emit = emit
        self.clock = clock
        self._key = key or attrgetter("uid")
        self._demand = demand or _task_demand
        self.registry = registry
        self.worker_table: Dict[str, WorkerEntry] = {}
        self.pending: Deque = deque()
        self.completed: Dict[Hashable, TaskState] = {}
        self.counts = {TaskState.DONE: 0, TaskState.FAILED: 0, TaskState.CANCELED: 0}
        self.submitted = 0
        self.rejected: List[ValidationError] = []
        self.placements: Dict[str, Placement] = {}
        self.bulks_sent = 0
        self.started = False
        self.stopped = False
        self._ready: Deque[str] = deque()
        self._seq = itertools.count(1)

    # -- events -------------------------------------------------------------

    def emit(self, kind: str, eid: str, event: str, attrs=None) -> None:
        if self._emit is not None:
            self._emit(self.clock(), kind, eid, event, attrs)

    # -- lifecycle ----------------------------------------------------------

    def worker_ids(self) -> List[str]:
        return [f"{self.coordinator_id}.w{i:04d}" for i in range(self.config.n_workers)]

    def worker_task(self, worker_id: str) -> TaskDescription:
        """The agent-level task that hosts one worker."""
        cfg = self.config
        tmpl = cfg.worker_descr
        if tmpl is None:
            return TaskDescription.executable(worker_id, ["pilotfarm-worker"],
                                              cores=cfg.cpn, gpus=cfg.gpn)
        return TaskDescription(worker_id, tmpl.kind, tmpl.payload, cfg.cpn, cfg.gpn,
                               tmpl.timeout_s, dict(tmpl.tags))

    def start(self) -> List[Tuple[str, Placement]]:
        """Place the coordinator (if it holds cores) and all workers.

        Placement is all-or-nothing: if any worker does not fit, every slot
        taken by this call is returned and :class:`PlacementError` raised.
        """
        if self.started:
            raise RuntimeError(f"{self.coordinator_id} already started")
        placed: List[Tuple[str, Placement]] = []
        if self.scheduler is not None:
            uids = []
            try:
                if self.config.coordinator_cores:
                    p = self.scheduler.try_place(
                        (self.coordinator_id, self.config.coordinator_cores, 0), "coordinator")
                    if p is None:
                        raise PlacementError(f"{self.coordinator_id} does not fit")
                    uids.append(self.coordinator_id)
                    self.placements[self.coordinator_id] = p
                for wid in self.worker_ids():
                    p = self.scheduler.try_place(self.worker_task(wid), "worker")
                    if p is None:
                        raise PlacementError(
                            f"{self.coordinator_id}: worker {wid} does not fit "
                            f"({self.config.cpn} cores, {self.config.gpn} gpus)")
                    uids.append(wid)
                    placed.append((wid, p))
            except Exception as e:
                for uid in uids:
                    self.scheduler.slots.release(uid)
                self.placements.clear()
                if isinstance(e, PlacementError):
                    raise
                raise PlacementError(str(e)) from e
        else:
            placed = [(wid, None) for wid in self.worker_ids()]
        for wid, p in placed:
            self.worker_table[wid] = WorkerEntry(wid, p.node_id if p else None,
                                                 cores=self.config.cpn, gpus=self.config.gpn)
            if p is not None:
                self.placements[wid] = p
        self.started = True
        self.emit("coordinator", self.coordinator_id, "coord_start",
                  {"pilot": self.pilot_id, "workers": self.config.n_workers})
        return placed

    def register(self, worker_id: str, node_id: Optional[int] = None,
                 cores: Optional[int] = None, gpus: Optional[int] = None) -> WorkerEntry:
        w = self.worker_table.get(worker_id)
        if w is None:
            w = self.worker_table[worker_id] = WorkerEntry(worker_id)
        if node_id is not None:
            w.node_id = node_id
        w.cores = self.config.cpn if cores is None else cores
        w.gpus = self.config.gpn if gpus is None else gpus
        w.state = WorkerState.ACTIVE
        return w

    @property
    def n_registered(self) -> int:
        return sum(1 for w in self.worker_table.values()
                   if w.state in (WorkerState.ACTIVE, WorkerState.DRAINING, WorkerState.DONE))

    # -- workload -----------------------------------------------------------

    def submit(self, tasks: Iterable, validate: bool = True) -> int:
        """Queue tasks; invalid ones are collected in ``rejected``."""
        if self.stopped:
            raise RuntimeError(f"{self.coordinator_id} is stopped")
        accepted = 0
        cpn, gpn = self.config.cpn, self.config.gpn
        emit = self._emit
        now = self.clock() if emit is not None else 0.0
        for t in tasks:
            if validate:
                try:
                    validate_task(t, self.registry)
                    if t.cores > cpn or t.gpus > gpn:
                        raise ValidationError(
                            "cores" if t.cores > cpn else "gpus",
                            f"exceeds worker size ({cpn} cores, {gpn} gpus)")
                except ValidationError as e:
                    self.rejected.append(e)
                    continue
            self.pending.append(t)
            accepted += 1
            if emit is not None:
                emit(now, "task", self._uid(t), "task_submit",
                     {"coordinator": self.coordinator_id})
        self.submitted += accepted
        return accepted

    def _uid(self, t) -> str:
        k = self._key(t)
        return k if isinstance(k, str) else f"t{k:07d}"

    def grant(self, worker_id: str, cores: int, gpus: int = 0) -> None:
        """Credit from a worker: ``cores``/``gpus`` more slots are free."""
        w = self.worker_table[worker_id]
        if w.state is not WorkerState.ACTIVE:
            return
        w.credit_cores += cores
        w.credit_gpus += gpus
        w.granted_cores += cores
        w.granted_gpus += gpus
        if not w.in_ready and w.credit_cores > 0:
            w.in_ready = True
            self._ready.append(worker_id)

    def assign(self) -> List[Tuple[str, List]]:
        """Hand the head of ``pending`` to workers holding credit.

        Credited workers are served round-robin, each receiving one bulk of
        at most ``bulk_size`` tasks that fit its remaining credit.  The bulk
        is a FIFO prefix of ``pending``; kinds are not segregated.
        """
        out: List[Tuple[str, List]] = []
        pending = self.pending
        if not pending:
            return out
        bulk_size = self.config.bulk_size
        demand = self._demand
        key = self._key
        ready = self._ready
        for _ in range(len(ready)):
            if not pending:
                break
            wid = ready.popleft()
            w = self.worker_table[wid]
            if w.state is not WorkerState.ACTIVE:
                w.in_ready = False
                continue
            bulk = []
            while pending and len(bulk) < bulk_size:
                c, g = demand(pending[0])
                if c > w.credit_cores or g > w.credit_gpus:
                    break
                t = pending.popleft()
                w.credit_cores -= c
                w.credit_gpus -= g
                w.outstanding[key(t)] = t
                bulk.append(t)
            if bulk:
                out.append((wid, bulk))
            if w.credit_cores > 0:
                ready.append(wid)
            else:
                w.in_ready = False
        if out:
            self.bulks_sent += len(out)
            if self._emit is not None:
                now = self.clock()
                for wid, bulk in out:
                    for t in bulk:
                        self._emit(now, "task", self._uid(t), "task_dispatch", {"worker": wid})
        return out

    def dispatch_step(self) -> List[Tuple[str, Message]]:
        """:meth:`assign`, with each bulk wrapped as a TASK_BULK message."""
        return [(wid, task_bulk(self.coordinator_id, next(self._seq), bulk))
                for wid, bulk in self.assign()]

    def complete(self, worker_id: str, key: Hashable, state: TaskState) -> bool:
        """Record a terminal result.  Returns False for results of tasks no
        longer outstanding on that worker (e.g. already failed as lost)."""
        w = self.worker_table.get(worker_id)
        if w is None or w.outstanding.pop(key, None) is None:
            return False
        self._finish(key, state)
        return True

    def _finish(self, key: Hashable, state: TaskState, reason: Optional[str] = None) -> None:
        """Record a terminal state; ``reason`` marks coordinator-side endings,
        which are logged here since no worker will report them."""
        state = TaskState(state)
        if not state.terminal:
            raise ValueError(f"{state} is not terminal")
        if key in self.completed:
            raise RuntimeError(f"task {key!r} completed twice")
        self.completed[key] = state
        self.counts[state] += 1
        if reason is not None and self._emit is not None:
            uid = key if isinstance(key, str) else f"t{key:07d}"
            self._emit(self.clock(), "task", uid, "task_end",
                       {"state": state.value, "reason": reason})

    def worker_lost(self, worker_id: str) -> List:
        """Fail everything outstanding on a vanished worker (no resend)."""
        w = self.worker_table[worker_id]
        if w.state in (WorkerState.LOST, WorkerState.DONE):
            return []
        w.state = WorkerState.LOST
        lost = list(w.outstanding.values())
        for k in list(w.outstanding):
            self._finish(k, TaskState.FAILED, "worker lost")
        w.outstanding.clear()
        w.credit_cores = w.credit_gpus = 0
        self.emit("worker", worker_id, "worker_lost", {"tasks": len(lost)})
        return lost

    def cancel_pending(self) -> int:
        n = len(self.pending)
        while self.pending:
            self._finish(self._key(self.pending.popleft()), TaskState.CANCELED, "stopped")
        return n

    def cancel_outstanding(self) -> int:
        n = 0
        for w in self.worker_table.values():
            for k in list(w.outstanding):
                self._finish(k, TaskState.CANCELED, "stopped")
                n += 1
            w.outstanding.clear()
        return n

    @property
    def n_outstanding(self) -> int:
        # every accepted task is pending, outstanding or completed
        return self.submitted - len(self.pending) - len(self.completed)

    @property
    def idle(self) -> bool:
        return not self.pending and self.n_outstanding == 0

    def summary(self, walltime_hit: bool = False) -> JoinSummary:
        return JoinSummary(self.counts[TaskState.DONE], self.counts[TaskState.FAILED],
                           self.counts[TaskState.CANCELED], self.submitted, walltime_hit)

    def begin_stop(self) -> bool:
        """Mark stopped and cancel queued work; False if already stopped."""
        if self.stopped:
            return False
        self.stopped = True
        self.cancel_pending()
        for w in self.worker_table.values():
            if w.state is WorkerState.ACTIVE:
                w.state = WorkerState.DRAINING
        return True

    def finish_stop(self) -> None:
        self.cancel_outstanding()
        for w in self.worker_table.values():
            if w.state in (WorkerState.DRAINING, WorkerState.ACTIVE):
                w.state = WorkerState.DONE
        if self.scheduler is not None:
            for uid in list(self.placements):
                kind = "coordinator" if uid == self.coordinator_id else "worker"
                try:
                    self.scheduler.release(uid, kind)
                except KeyError:
                    pass
            self.placements.clear()
        self.emit("coordinator", self.coordinator_id, "coord_stop", self._summary_attrs())

    def _summary_attrs(self) -> dict:
        s = self.summary()
        return {"done": s.done, "failed": s.failed, "canceled": s.canceled,
                "submitted": s.submitted}
