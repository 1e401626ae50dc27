import math
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gen import random_task_log
from oracles import brute_utilization, scan_phases
from pilotfarm.events import EventRecord
from pilotfarm.metrics import (EmptyWindow, EventDigest, MissingEvents, NoTasks, build_report,
                               concurrency_series, detect_stalls, exact_weighted_span,
                               phase_boundaries, rate_series, startup_breakdown, utilization)
from pilotfarm.resources import Node, NodePool


def pool(n_nodes, cores, t0=0.0, t1=1e6, gpus=0):
    return NodePool("p0", [Node(i, cores, gpus) for i in range(n_nodes)], t0, t1)


def task(uid, s, e, cores=1, kind="FUNCTION", gpus=0):
    return [EventRecord(s, "task", uid, "task_start",
                        {"cores": str(cores), "gpus": str(gpus), "kind": kind, "pilot": "p0"}),
            EventRecord(e, "task", uid, "task_end", {"state": "DONE"})]


def log(*tasks):
    recs = [r for t in tasks for r in t]
    return sorted(recs, key=lambda r: (r.t, r.entity_id))


def test_full_occupancy():
    assert utilization(log(task("a", 0, 10, 2)), pool(1, 2), (0, 10)) == 1.0


def test_half_core_half_time():
    assert utilization(log(task("a", 0, 5)), pool(1, 2), (0, 10)) == 0.25


def test_staircase():
    ev = log(*(task(f"w{i}", i, 10) for i in range(4)))
    assert utilization(ev, pool(4, 1), (0, 10)) == 0.85


def test_gpu_utilization():
    ev = log(task("a", 0, 10, gpus=3))
    assert utilization(ev, pool(1, 4, gpus=6), (0, 10), "gpus") == 0.5


def test_empty_window():
    with pytest.raises(EmptyWindow):
        utilization(log(task("a", 0, 1)), pool(1, 1), (5, 5))


def test_no_tasks():
    with pytest.raises(NoTasks):
        phase_boundaries([])


@given(st.lists(st.tuples(st.integers(0, 2 ** 40), st.integers(0, 2 ** 20),
                          st.integers(0, 64)), min_size=0, max_size=40))
def test_exact_weighted_span(rows):
    from fractions import Fraction
    a = np.array([r[0] + r[1] for r in rows], dtype=float) * 1e-3
    b = np.array([r[0] for r in rows], dtype=float) * 1e-3
    w = np.array([r[2] for r in rows], dtype=np.int64)
    exact = sum((Fraction(x) - Fraction(y)) * int(k) for x, y, k in zip(a, b, w))
    assert exact_weighted_span(a, b, w) == float(exact)


@settings(max_examples=60)
@given(st.integers(0, 2 ** 32), st.booleans())
def test_utilization_matches_sweep(seed, integer):
    recs, cap, t0, t1 = random_task_log(random.Random(seed), 40, integer_times=integer)
    got = utilization(recs, window=(t0, t1))
    want = brute_utilization(recs, cap, t0, t1)
    if integer:
        assert got == want
    else:
        assert abs(got - want) <= 1e-9
    assert 0.0 <= got <= 1.0


@settings(max_examples=40)
@given(st.integers(0, 2 ** 32))
def test_phases_match_scan(seed):
    recs, *_ = random_task_log(random.Random(seed), 30, integer_times=True)
    ph = phase_boundaries(recs)
    assert (ph.t_startup_end, ph.t_cooldown_start) == scan_phases(recs)


def test_constant_concurrency_phases():
    ev = log(*(task(f"t{i}", 0, 10) for i in range(4)))
    ph = phase_boundaries(ev)
    assert (ph.t_startup_end, ph.t_cooldown_start) == (0, 10)


def test_single_task_phases():
    ph = phase_boundaries(log(task("a", 3, 7)))
    assert (ph.t_startup_end, ph.t_cooldown_start, ph.peak) == (3, 7, 1)


def test_ramp_plateau_decay():
    # task i starts at 0.6 i and ends at 200 - 0.6 i: concurrency climbs to 100 over 60 s
    ev = log(*(task(f"t{i:03d}", 0.6 * i, 200 - 0.6 * i) for i in range(100)))
    ph = phase_boundaries(ev)
    assert (ph.t_startup_end, ph.t_cooldown_start) == scan_phases(ev)
    assert ph.t_startup_end == pytest.approx(0.6 * 94)
    assert ph.peak == 100


def test_rate_uniform_hour():
    ev = log(*(task(f"t{i:04d}", i, i + 0.5) for i in range(3600)))
    r = rate_series(ev, 60.0, 0.0, 3600.0)
    assert r.total.size == 60 and np.all(r.total == 3600.0)
    assert r.mean() == 3600.0


def test_rate_one_bin():
    ev = log(*(task(f"t{i}", 0, 10 + i * 0.01) for i in range(50)))
    r = rate_series(ev, 60.0, 0.0, 120.0)
    assert list(r.total) == [50 * 3600 / 60, 0.0]
    assert r.mean() == 50 * 60


@settings(max_examples=40)
@given(st.integers(0, 2 ** 32), st.sampled_from([1.0, 7.5, 60.0]))
def test_rate_sums_to_completions(seed, bin_s):
    recs, _, t0, t1 = random_task_log(random.Random(seed), 50)
    r = rate_series(recs, bin_s, t0, t1)
    assert r.total.sum() * bin_s / 3600 == pytest.approx(50)
    assert sum(v.sum() for v in r.by_kind.values()) == pytest.approx(r.total.sum())


def test_stall_detection():
    ev = log(*(task(f"a{i:03d}", i, i + 0.5) for i in range(100)),
             *(task(f"b{i:03d}", 200 + i, 200 + i + 0.5) for i in range(100)))
    r = rate_series(ev, 10.0, 0.0, 300.0)
    stalls = detect_stalls(r, (0.0, 300.0))
    assert stalls == [(100.0, 200.0)]


def marks(pairs):
    return [EventRecord(t, k, e, ev, a) for t, k, e, ev, a in pairs]


def test_startup_zero_delays():
    ev = marks([(0.0, "pilot", "p0", "pilot_active", {"nodes": "1", "cores_per_node": "2"}),
                (0.0, "coordinator", "p0.c0", "coord_start", {}),
                (0.0, "coordinator", "p0.c0", "coord_ready", {}),
                (0.0, "worker", "p0.c0.w0", "worker_start", {})]) + task("a", 0.0, 1.0)
    sb = startup_breakdown(ev)
    assert all(v == 0.0 for v in sb.components.values()) and sb.t_first_task == 0.0


def test_startup_echoes_delays():
    ev = marks([(0.0, "pilot", "p0", "pilot_active", {"nodes": "1", "cores_per_node": "2"}),
                (78.0, "pilot", "p0", "bootstrap_done", {}),
                (78.0, "pilot", "p0", "staging_done", {}),
                (79.0, "coordinator", "p0.c0", "coord_start", {}),
                (121.0, "coordinator", "p0.c0", "coord_ready", {}),
                (131.0, "worker", "p0.c0.w0", "worker_start", {}),
                (461.0, "worker", "p0.c0.w1", "worker_start", {})]) + task("a", 131.0, 140.0)
    sb = startup_breakdown(ev)
    c = sb.components
    assert (c["pilot_bootstrap"], c["staging"], c["coordinator_startup"],
            c["input_preprocessing"], c["worker_launch_spread"]) == (78, 78, 1, 42, 330)
    assert sb.critical_path() == sb.t_first_task == 131


def test_startup_missing_events():
    with pytest.raises(MissingEvents):
        startup_breakdown(task("a", 0, 1))


def test_concurrency_integral_matches_report():
    recs, cap, t0, t1 = random_task_log(random.Random(3), 60, integer_times=True)
    d = EventDigest().feed(recs)
    rep = build_report(d, bin_s=10.0)
    T, _, busy, _, avail = concurrency_series(d, d.pools())
    busy_s = float(np.sum(busy[:-1] * np.diff(T)))
    avail_s = float(np.sum(avail[:-1] * np.diff(T)))
    assert busy_s / avail_s == rep.avg == brute_utilization(recs, cap, t0, t1)


def test_report_fields():
    recs, cap, t0, t1 = random_task_log(random.Random(5), 80)
    rep = build_report(recs, bin_s=5.0)
    assert rep.tasks == 80 and rep.pilots == 1 and rep.nodes == 2
    assert 0 <= rep.avg <= 1 and 0 <= rep.steady <= 1
    assert rep.t_available == t0 and rep.t_end == t1
    assert rep.states == {"DONE": 80}
    assert set(rep.summary_row()) >= {"Utilization avg", "Rate mean [/h]"}
    assert "Utilization" in rep.to_table()
    assert math.isclose(rep.task_time_mean * 80,
                        sum(r.t for r in recs if r.event == "task_end")
                        - sum(r.t for r in recs if r.event == "task_start"))
