import random
from collections import deque

import pytest
from hypothesis import given, strategies as st

from pilotfarm.resources import Node, NodePool
from pilotfarm.scheduler import (AgentScheduler, NoFit, SlotMap, UnknownAllocation, place,
                                 release, schedule_loop)


def test_first_fit_empty_pool():
    s = SlotMap([Node(0, 56), Node(1, 56)])
    p = place(s, ("A", 56, 0))
    assert p.node_id == 0 and s.free_cores[0] == 0 and p.core_indices == tuple(range(56))


def brute_first_fit(free, c):
    for i, f in enumerate(free):
        if f >= c:
            return i
    return -1


def test_first_fit_skips_small_node():
    s = SlotMap([Node(0, 5), Node(1, 5)])
    place(s, ("x", 2, 0))
    assert list(s.free_cores) == [3, 5]
    assert place(s, ("t", 4, 0)).node_id == brute_first_fit([3, 5], 4) == 1


def test_no_fit_leaves_map_unchanged():
    s = SlotMap([Node(0, 3), Node(1, 3)])
    place(s, ("x", 1, 0))
    s.release("x")
    before = s.snapshot()
    with pytest.raises(NoFit):
        place(s, ("t", 4, 0))
    assert s.snapshot() == before


def test_gpu_dimension():
    s = SlotMap([Node(0, 4, 0), Node(1, 4, 2)])
    p = place(s, ("g", 1, 2))
    assert p.node_id == 1 and p.gpu_indices == (0, 1)
    assert s.try_place(("h", 1, 1)) is None


def test_release_inverse():
    s = SlotMap([Node(0, 4), Node(1, 4)])
    before = s.snapshot()
    place(s, ("a", 3, 0))
    assert release(s, "a").snapshot() == before
    with pytest.raises(UnknownAllocation):
        s.release("a")


def test_double_place_rejected():
    s = SlotMap([Node(0, 4)])
    place(s, ("a", 1, 0))
    with pytest.raises(ValueError):
        place(s, ("a", 1, 0))


@given(st.integers(0, 2 ** 32 - 1))
def test_random_place_release_conserves_capacity(seed):
    rng = random.Random(seed)
    nodes = [Node(i, rng.randint(1, 8), rng.randint(0, 2)) for i in range(rng.randint(1, 5))]
    s = SlotMap(nodes)
    live = []
    for k in range(200):
        if live and rng.random() < 0.45:
            uid = live.pop(rng.randrange(len(live)))
            s.release(uid)
        else:
            uid = f"t{k}"
            c, g = rng.randint(1, 8), rng.randint(0, 2)
            expect = -1
            for i, n in enumerate(nodes):
                if s.free_cores[i] >= c and s.free_gpus[i] >= g:
                    expect = i
                    break
            p = s.try_place((uid, c, g))
            assert (p.node_id if p else -1) == expect
            if p:
                live.append(uid)
                # assigned indices are distinct from every other allocation on the node
                others = [q for q in s.allocations.values() if q.node_id == p.node_id and q is not p]
                used = {i for q in others for i in q.core_indices}
                assert not used & set(p.core_indices)
        s.check()
    assert s.oversubscriptions == 0


def test_fifo_when_node_frees():
    s = SlotMap([Node(0, 56)])
    place(s, ("busy", 56, 0))
    q = deque([("A", 56, 0), ("B", 1, 0)])
    assert list(schedule_loop(q, s)) == []
    s.release("busy")
    out = [p.task_uid for p in schedule_loop(q, s)]
    assert out == ["A"] and list(q) == [("B", 1, 0)]


def reference_window(queue, free, lookahead):
    """Windowed FIFO over a single scalar free-core count per node."""
    placed, rest = [], []
    free = list(free)
    for k, (uid, c, _) in enumerate(queue):
        i = brute_first_fit(free, c) if k < lookahead else -1
        if i >= 0:
            free[i] -= c
            placed.append((uid, i))
        else:
            rest.append((uid, c, 0))
    return placed, rest


def test_lookahead_places_small_task_behind_big_one():
    s = SlotMap([Node(0, 56)])
    place(s, ("busy", 55, 0))
    q = deque([("A", 56, 0), ("B", 1, 0)])
    assert [p.task_uid for p in schedule_loop(q, s)] == ["B"]
    assert list(q) == [("A", 56, 0)]


@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 8))
def test_schedule_loop_matches_reference(seed, lookahead):
    rng = random.Random(seed)
    nodes = [Node(i, rng.randint(1, 8)) for i in range(rng.randint(1, 4))]
    s = SlotMap(nodes)
    q = [(f"t{i}", rng.randint(1, 8), 0) for i in range(rng.randint(0, 20))]
    placed, rest = reference_window(q, [n.cores for n in nodes], lookahead)
    dq = deque(q)
    got = [(p.task_uid, p.node_id) for p in schedule_loop(dq, s, lookahead)]
    assert got == placed and list(dq) == rest


def test_ten_thousand_unit_tasks():
    pool = NodePool("p", [Node(i, 56) for i in range(100)], 0.0, 1e9)
    sch = AgentScheduler(pool)
    for i in range(10_000):
        sch.submit((f"t{i}", 1, 0))
    placed = []
    while sch.waiting:
        batch = sch.schedule()
        assert batch
        placed += batch
        for p in batch[: len(batch) // 2]:
            sch.release(p.task_uid)
    sch.slots.check()
    assert len(placed) == 10_000 and sch.slots.oversubscriptions == 0


def test_agent_scheduler_emits():
    log = []
    pool = NodePool("p", [Node(0, 2)], 0.0, 10.0)
    sch = AgentScheduler(pool, emit=lambda *a: log.append(a), clock=lambda: 3.0)
    sch.submit(("a", 1, 0))
    sch.schedule()
    sch.release("a")
    assert [e[3] for e in log] == ["task_schedule", "task_release"]
    with pytest.raises(NoFit):
        sch.place_now(("big", 3, 0))
