"""Per-pilot agent scheduler: first-fit slot allocation over nodes.

Nodes are scanned in ascending ``node_id``; a request is never split across
nodes.  CPU cores and GPUs are independent dimensions that must both fit on
the chosen node.
"""

from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass
from typing import Callable, Deque, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .resources import Node, NodePool


class NoFit(LookupError):
    pass


class UnknownAllocation(KeyError):
    pass


class OversubscribeError(AssertionError):
    pass


@dataclass(frozen=True)
class Placement:
    task_uid: str
    node_id: int
    core_indices: Tuple[int, ...]
    gpu_indices: Tuple[int, ...]
    t_placed: float = 0.0

    @property
    def cores(self) -> int:
        return len(self.core_indices)

    @property
    def gpus(self) -> int:
        return len(self.gpu_indices)


def _demand(t) -> Tuple[str, int, int]:
    if isinstance(t, tuple):
        return t
    return t.uid, t.cores, t.gpus


class SlotMap:
    """Free-slot ledger for one pool.

    ``free_cores``/``free_gpus`` are numpy vectors indexed by node position;
    the allocation table maps task uid to its :class:`Placement`.
    """

    def __init__(self, nodes: Sequence[Node]):
        self.nodes = list(nodes)
        self.cap_cores = np.array([n.cores for n in self.nodes], dtype=np.int64)
        self.cap_gpus = np.array([n.gpus for n in self.nodes], dtype=np.int64)
        self.free_cores = self.cap_cores.copy()
        self.free_gpus = self.cap_gpus.copy()
        self.allocations: Dict[str, Placement] = {}
        # lazily materialized per-node free index lists
        self._core_idx: Dict[int, List[int]] = {}
        self._gpu_idx: Dict[int, List[int]] = {}
        self.oversubscriptions = 0

    @classmethod
    def from_pool(cls, pool: NodePool) -> "SlotMap":
        return cls(pool.nodes)

    def _take(self, table, cap, node: int, k: int) -> Tuple[int, ...]:
        if k == 0:
            return ()
        free = table.get(node)
        if free is None:
            free = table[node] = list(range(int(cap[node])))
        taken = tuple(free[:k])
        del free[:k]
        return taken

    def _give(self, table, node: int, idx: Tuple[int, ...]) -> None:
        if not idx:
            return
        free = table[node]
        free.extend(idx)
        free.sort()

    def find(self, cores: int, gpus: int = 0) -> int:
        """First node index that can host the request, or -1."""
        if gpus:
            fits = (self.free_cores >= cores) & (self.free_gpus >= gpus)
        else:
            fits = self.free_cores >= cores
        i = int(np.argmax(fits))
        return i if fits[i] else -1

    def try_place(self, t, now: float = 0.0) -> Optional[Placement]:
        uid, cores, gpus = _demand(t)
        if uid in self.allocations:
            raise ValueError(f"{uid} is already allocated")
        i = self.find(cores, gpus)
        if i < 0:
            return None
        self.free_cores[i] -= cores
        self.free_gpus[i] -= gpus
        if self.free_cores[i] < 0 or self.free_gpus[i] < 0:
            self.oversubscriptions += 1
            raise OversubscribeError(f"node {i} oversubscribed by {uid}")
        p = Placement(uid, self.nodes[i].node_id,
                      self._take(self._core_idx, self.cap_cores, i, cores),
                      self._take(self._gpu_idx, self.cap_gpus, i, gpus), now)
        self.allocations[uid] = p
        return p

    def place(self, t, now: float = 0.0) -> Placement:
        p = self.try_place(t, now)
        if p is None:
            uid, cores, gpus = _demand(t)
            raise NoFit(f"{uid}: no node has {cores} cores and {gpus} gpus free")
        return p

    def release(self, uid: str) -> Placement:
        try:
            p = self.allocations.pop(uid)
        except KeyError:
            raise UnknownAllocation(uid) from None
        i = self._index(p.node_id)
        self.free_cores[i] += p.cores
        self.free_gpus[i] += p.gpus
        if self.free_cores[i] > self.cap_cores[i] or self.free_gpus[i] > self.cap_gpus[i]:
            self.oversubscriptions += 1
            raise OversubscribeError(f"node {i} released beyond capacity")
        self._give(self._core_idx, i, p.core_indices)
        self._give(self._gpu_idx, i, p.gpu_indices)
        return p

    def _index(self, node_id: int) -> int:
        # node ids are positions for pools built by NodePool.build
        if 0 <= node_id < len(self.nodes) and self.nodes[node_id].node_id == node_id:
            return node_id
        for i, n in enumerate(self.nodes):
            if n.node_id == node_id:
                return i
        raise KeyError(node_id)

    def check(self) -> None:
        """Recompute free counts from the allocation table and compare."""
        used_c = np.zeros_like(self.cap_cores)
        used_g = np.zeros_like(self.cap_gpus)
        for p in self.allocations.values():
            i = self._index(p.node_id)
            used_c[i] += p.cores
            used_g[i] += p.gpus
        if not (np.array_equal(used_c + self.free_cores, self.cap_cores)
                and np.array_equal(used_g + self.free_gpus, self.cap_gpus)):
            raise OversubscribeError("slot accounting out of balance")
        if (self.free_cores < 0).any() or (self.free_gpus < 0).any():
            raise OversubscribeError("negative free slots")

    def snapshot(self) -> Tuple[Tuple[int, ...], Tuple[int, ...], Tuple[str, ...]]:
        return (tuple(self.free_cores.tolist()), tuple(self.free_gpus.tolist()),
                tuple(sorted(self.allocations)))

    @property
    def max_free_cores(self) -> int:
        return int(self.free_cores.max()) if len(self.nodes) else 0


def place(s: SlotMap, t, now: float = 0.0) -> Placement:
    return s.place(t, now)


def release(s: SlotMap, uid: str) -> SlotMap:
    s.release(uid)
    return s


DEFAULT_LOOKAHEAD = 1024


def schedule_loop(queue: Deque, s: SlotMap, lookahead: int = DEFAULT_LOOKAHEAD,
                  now: float = 0.0) -> Iterator[Placement]:
    """One scheduling pass over the head of ``queue``.

    Tasks are tried in FIFO order; a task that does not fit is skipped, but
    only the first ``lookahead`` queued tasks are ever considered.  Placed
    tasks are removed from ``queue``.  Being a generator, the caller may
    release slots between yields; later candidates see the freed capacity.
    """
    skipped = []
    try:
        max_free = s.max_free_cores
        for _ in range(lookahead):
            if max_free == 0 or not queue:
                break
            t = queue.popleft()
            _, cores, _ = _demand(t)
            p = s.try_place(t, now) if cores <= max_free else None
            if p is None:
                skipped.append(t)
                continue
            yield p
            max_free = s.max_free_cores
    finally:
        queue.extendleft(reversed(skipped))


class AgentScheduler:
    """Single scheduler per pilot; all slot mutations go through its lock."""

    def __init__(self, pool: NodePool, lookahead: int = DEFAULT_LOOKAHEAD,
                 emit: Optional[Callable] = None, clock: Optional[Callable[[], float]] = None):
        self.pool = pool
        self.slots = SlotMap.from_pool(pool)
        self.lookahead = lookahead
        self.waiting: Deque = deque()
        self._lock = threading.RLock()
        self._emit = emit
        self._clock = clock or (lambda: 0.0)

    def submit(self, t) -> None:
        with self._lock:
            self.waiting.append(t)

    def schedule(self) -> List[Placement]:
        with self._lock:
            now = self._clock()
            out = list(schedule_loop(self.waiting, self.slots, self.lookahead, now))
        if self._emit is not None:
            for p in out:
                self._emit(now, "task", p.task_uid, "task_schedule",
                           {"node": p.node_id, "cores": p.cores, "gpus": p.gpus})
        return out

    def try_place(self, t, entity_kind: str = "task") -> Optional[Placement]:
        """Place immediately, bypassing the queue; None if nothing fits."""
        with self._lock:
            now = self._clock()
            p = self.slots.try_place(t, now)
        if p is not None and self._emit is not None:
            self._emit(now, entity_kind, p.task_uid, "task_schedule",
                       {"node": p.node_id, "cores": p.cores, "gpus": p.gpus})
        return p

    def place_now(self, t, entity_kind: str = "task") -> Placement:
        p = self.try_place(t, entity_kind)
        if p is None:
            uid, cores, gpus = _demand(t)
            raise NoFit(f"{uid}: no node has {cores} cores and {gpus} gpus free")
        return p

    def release(self, uid: str, entity_kind: str = "task") -> Placement:
        with self._lock:
            p = self.slots.release(uid)
            now = self._clock()
        if self._emit is not None:
            self._emit(now, entity_kind, uid, "task_release", {"node": p.node_id})
        return p
