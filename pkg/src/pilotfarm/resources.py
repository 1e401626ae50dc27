"""Node pools and the batch adapters that hand them out.

Only two adapters exist: LOCAL carves virtual nodes out of the host machine,
SIM hands out pools on a :class:`~pilotfarm.simclock.SimClock` after a
configured queue wait.
"""

from __future__ import annotations

import itertools
import os
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Iterable, List, Optional, Tuple

from .model import Backend, PilotDescription
from .simclock import SimClock


class CapacityError(RuntimeError):
    pass


class AdapterError(RuntimeError):
    pass


class PoolState(str, Enum):
    PENDING = "PENDING"
    ACTIVE = "ACTIVE"
    DONE = "DONE"


@dataclass(frozen=True)
class Node:
    node_id: int
    cores: int
    gpus: int = 0


@dataclass
class NodePool:
    pilot_id: str
    nodes: List[Node]
    t_available: float
    t_deadline: float
    # set when the pilot ends before its deadline
    t_released: Optional[float] = None

    def __post_init__(self):
        if not self.t_deadline > self.t_available:
            raise ValueError("t_deadline must be after t_available")
        if len({(n.cores, n.gpus) for n in self.nodes}) > 1:
            raise ValueError("nodes within a pilot must be homogeneous")

    @classmethod
    def build(cls, p: PilotDescription, t_available: float) -> "NodePool":
        nodes = [Node(i, p.cores_per_node, p.gpus_per_node) for i in range(p.n_nodes)]
        return cls(p.pilot_id, nodes, float(t_available), float(t_available) + p.walltime_s)

    @property
    def cores(self) -> int:
        return sum(n.cores for n in self.nodes)

    @property
    def gpus(self) -> int:
        return sum(n.gpus for n in self.nodes)

    @property
    def t_end(self) -> float:
        return self.t_released if self.t_released is not None else self.t_deadline


def host_capacity() -> int:
    env = os.environ.get("PILOTFARM_HOST_CORES")
    if env:
        return int(env)
    return os.cpu_count() or 1


class BatchAdapter:
    """Interface every resource adapter implements."""

    def submit(self, p: PilotDescription):
        raise NotImplementedError

    def poll(self, handle) -> PoolState:
        raise NotImplementedError

    def cancel(self, handle) -> None:
        raise NotImplementedError

    def pool(self, handle) -> NodePool:
        raise NotImplementedError


@dataclass
class _Job:
    pilot: PilotDescription
    pool: Optional[NodePool] = None
    canceled_at: Optional[float] = None
    reported: List[PoolState] = field(default_factory=list)


class _AdapterBase(BatchAdapter):
    def __init__(self):
        self._jobs: Dict[int, _Job] = {}
        self._ids = itertools.count()

    def _state(self, job: _Job, now: float) -> PoolState:
        raise NotImplementedError

    def poll(self, handle) -> PoolState:
        job = self._jobs.get(handle)
        if job is None:
            raise AdapterError(f"unknown handle {handle!r}")
        st = self._state(job, self._now())
        if not job.reported or job.reported[-1] is not st:
            job.reported.append(st)
        return st

    def cancel(self, handle) -> None:
        job = self._jobs.get(handle)
        if job is None:
            raise AdapterError(f"unknown handle {handle!r}")
        if job.canceled_at is None:
            job.canceled_at = self._now()
            if job.pool is not None and job.pool.t_released is None:
                job.pool.t_released = max(job.canceled_at, job.pool.t_available)

    def pool(self, handle) -> NodePool:
        return self._jobs[handle].pool

    def _now(self) -> float:
        raise NotImplementedError


class LocalAdapter(_AdapterBase):
    """Virtual nodes on this host; active immediately."""

    def __init__(self, host_cores: Optional[int] = None,
                 clock: Callable[[], float] = time.time):
        super().__init__()
        self.host_cores = host_cores if host_cores is not None else host_capacity()
        self.clock = clock
        self._in_use = 0

    def _now(self) -> float:
        return self.clock()

    def submit(self, p: PilotDescription):
        p.validate()
        if self._in_use + p.cores > self.host_cores:
            raise CapacityError(
                f"pilot {p.pilot_id} needs {p.cores} cores; "
                f"host capacity {self.host_cores}, {self._in_use} already in use")
        self._in_use += p.cores
        h = next(self._ids)
        self._jobs[h] = _Job(p, NodePool.build(p, self._now()))
        return h

    def cancel(self, handle) -> None:
        job = self._jobs.get(handle)
        if job is not None and job.canceled_at is None:
            self._in_use -= job.pilot.cores
        super().cancel(handle)

    def _state(self, job: _Job, now: float) -> PoolState:
        if job.canceled_at is not None or now >= job.pool.t_deadline:
            return PoolState.DONE
        return PoolState.ACTIVE


class SimAdapter(_AdapterBase):
    """Pools become active at ``available_at_s`` on the sim clock."""

    def __init__(self, clock: SimClock):
        super().__init__()
        self.clock = clock

    def _now(self) -> float:
        return self.clock.now

    def submit(self, p: PilotDescription):
        p.validate()
        h = next(self._ids)
        self._jobs[h] = _Job(p, NodePool.build(p, p.available_at_s))
        return h

    def _state(self, job: _Job, now: float) -> PoolState:
        if job.canceled_at is not None and job.canceled_at < job.pool.t_available:
            return PoolState.DONE
        if now < job.pool.t_available:
            return PoolState.PENDING
        if job.canceled_at is not None or now >= job.pool.t_deadline:
            return PoolState.DONE
        return PoolState.ACTIVE


def acquire(p: PilotDescription, adapter: Optional[BatchAdapter] = None,
            clock: Optional[SimClock] = None) -> NodePool:
    """Acquire the pool described by ``p``.

    LOCAL pools are active on return.  SIM pools carry ``t_available`` =
    ``p.available_at_s`` on the sim clock; the caller schedules work from then.
    """
    p.validate()
    if adapter is None:
        if p.backend is Backend.LOCAL:
            adapter = LocalAdapter()
        else:
            adapter = SimAdapter(clock or SimClock())
    h = adapter.submit(p)
    pool = adapter.pool(h)
    if pool is None:
        raise AdapterError(f"adapter returned no pool for {p.pilot_id}")
    return pool


def peak_concurrency(pools: Iterable[NodePool]) -> int:
    """Largest number of pools active at the same instant."""
    edges: List[Tuple[float, int]] = []
    for pool in pools:
        edges.append((pool.t_available, 1))
        edges.append((pool.t_end, -1))
    # a pool ending at t does not overlap one starting at t
    edges.sort(key=lambda e: (e[0], e[1]))
    cur = best = 0
    for _, d in edges:
        cur += d
        best = max(best, cur)
    return best
