"""Experiment driver: run a configuration, write the log, report and plot data.

Run directory layout::

    events.log        merged event log (all processes), sorted by (t, entity_id)
    report.json       Table-1 fields plus details
    report.txt        the same as a text table
    durations.tsv     duration histogram
    concurrency.tsv   running tasks / busy cores over time
    rate.tsv          completions per hour per bin
    *.png             figures of the three TSV files
    logs/             per-process logs (LOCAL only)
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .config import ConfigError, ExperimentConfig
from .coordinator import JoinSummary, PlacementError, stride
from .events import EventLog, WallClock, merge_logs, read_events
from .metrics import (EventDigest, KINDS, MissingEvents, NoTasks, UtilizationReport,
                      build_report, concurrency_series, rate_series)
from .model import Backend
from .resources import CapacityError, LocalAdapter, NodePool
from .scheduler import AgentScheduler
from .workload import generate_workload

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

EVENTS = "events.log"
DURATION_FILE = "durations.tsv"
CONCURRENCY_FILE = "concurrency.tsv"
RATE_FILE = "rate.tsv"
DURATION_BINS = 50


class MissingArtifacts(FileNotFoundError):
    pass


@dataclass
class RunOutcome:
    exit_code: int
    out_dir: str
    report: Optional[UtilizationReport] = None
    summaries: Dict[str, JoinSummary] = field(default_factory=dict)
    errors: List[str] = field(default_factory=list)
    oversubscriptions: int = 0
    wall_s: float = 0.0


def _write_report(out_dir: str, report: UtilizationReport) -> None:
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8") as f:
        f.write(report.to_table())


def _report(d: EventDigest, cfg: ExperimentConfig, pools) -> Optional[UtilizationReport]:
    try:
        return build_report(d, cfg.bin_s, cfg.threshold, pools)
    except (NoTasks, MissingEvents) as e:
        log.warning("no report: %s", e)
        return None


def run_experiment(cfg: ExperimentConfig, out_dir: Optional[str] = None,
                   plots: bool = True) -> RunOutcome:
    """Validate, run on the configured backend and write all artifacts.

    Exit code 0 when every pilot finished its work before walltime, 2 for
    configuration errors and 3 for runtime failures.
    """
    out_dir = out_dir or cfg.output_dir
    try:
        cfg.validate()
    except ConfigError as e:
        log.error("config error: %s", e)
        return RunOutcome(EXIT_CONFIG, out_dir, errors=[str(e)])
    os.makedirs(out_dir, exist_ok=True)
    t0 = time.monotonic()
    if cfg.backend is Backend.SIM:
        outcome = _run_sim(cfg, out_dir)
    else:
        outcome = _run_local(cfg, out_dir)
    if outcome.exit_code != EXIT_CONFIG and plots and outcome.report is not None:
        emit_plots(out_dir)
    outcome.wall_s = time.monotonic() - t0
    return outcome


def _run_sim(cfg: ExperimentConfig, out_dir: str) -> RunOutcome:
    from .simulate import Simulation

    d = EventDigest()
    with EventLog(os.path.join(out_dir, EVENTS)) as ev:
        ev.listeners.append(d)
        o = Simulation(cfg, log=ev).run()
    report = _report(d, cfg, o.pools)
    if report is not None:
        _write_report(out_dir, report)
    code = EXIT_OK if o.clean and report is not None else EXIT_RUNTIME
    return RunOutcome(code, out_dir, report, o.summaries, o.errors, o.oversubscriptions)


def _run_local(cfg: ExperimentConfig, out_dir: str) -> RunOutcome:
    from .local import LocalCoordinator
    from .worker import REGISTRY

    logs_dir = os.path.join(out_dir, "logs")
    os.makedirs(logs_dir, exist_ok=True)
    clock = WallClock()
    harness_log = os.path.join(logs_dir, "harness.events")
    ev = EventLog(harness_log, clock=clock, flush_every=1024)
    adapter = LocalAdapter(cfg.host_cores, clock)
    workload = generate_workload(cfg.workload)
    errors: List[str] = []
    summaries: Dict[str, JoinSummary] = {}
    pools: List[NodePool] = []
    coords: List[LocalCoordinator] = []
    handles = []
    walltime_hit = False
    try:
        try:
            for p in cfg.pilots:
                h = adapter.submit(p)
                handles.append(h)
                pool = adapter.pool(h)
                pools.append(pool)
                ev.emit(pool.t_available, "pilot", p.pilot_id, "pilot_active",
                        {"nodes": p.n_nodes, "cores_per_node": p.cores_per_node,
                         "gpus_per_node": p.gpus_per_node, "walltime_s": p.walltime_s})
        except CapacityError as e:
            errors.append(str(e))
            return RunOutcome(EXIT_CONFIG, out_dir, errors=errors)
        n_p = len(cfg.pilots)
        by_pilot = []
        for j, (p, pool) in enumerate(zip(cfg.pilots, pools)):
            sched = AgentScheduler(pool, emit=ev.emit, clock=clock)
            mine = []
            for k, cc in enumerate(cfg.coordinators_of(p.pilot_id)):
                c = LocalCoordinator(f"{p.pilot_id}.c{k}", cc, sched, ev, logs_dir, clock,
                                     p.pilot_id, REGISTRY)
                try:
                    c.start()
                except PlacementError as e:
                    errors.append(str(e))
                    continue
                coords.append(c)
                mine.append(c)
            by_pilot.append((j, pool, mine))
        for c in coords:
            if not c.wait_registered(60.0):
                errors.append(f"{c.coordinator_id}: workers did not register in time")
        for j, pool, mine in by_pilot:
            idx = range(j, len(workload), n_p)
            for k, c in enumerate(mine):
                c.submit(workload.describe(i) for i in stride(idx, k, len(mine)))
        for j, pool, mine in by_pilot:
            for c in mine:
                budget = pool.t_deadline - clock()
                if cfg.join_timeout_s is not None:
                    budget = min(budget, cfg.join_timeout_s)
                s = c.join(max(0.0, budget))
                walltime_hit |= s.walltime_hit
    except Exception as e:  # noqa: BLE001 - report, then clean up below
        log.exception("run failed")
        errors.append(f"{type(e).__name__}: {e}")
    finally:
        for c in coords:
            summaries[c.coordinator_id] = c.stop()
        t_done = clock()
        for p, pool, h in zip(cfg.pilots, pools, handles):
            adapter.cancel(h)
            pool.t_released = t_done
            ev.emit(t_done, "pilot", p.pilot_id, "pilot_done", {"walltime_hit": int(walltime_hit)})
        ev.close()
    paths = [harness_log] + [p for c in coords for p in c.worker_logs if os.path.exists(p)]
    merge_logs(paths, os.path.join(out_dir, EVENTS))
    d = EventDigest().feed(read_events(os.path.join(out_dir, EVENTS)))
    report = _report(d, cfg, pools)
    if report is not None:
        _write_report(out_dir, report)
    lost = any(w.state.value == "LOST" for c in coords for w in c.worker_table.values())
    clean = (not errors and not walltime_hit and not lost and report is not None
             and all(s.conserved for s in summaries.values()))
    return RunOutcome(EXIT_OK if clean else EXIT_RUNTIME, out_dir, report, summaries, errors)


def _previous_details(run_dir: str) -> dict:
    path = os.path.join(run_dir, "report.json")
    if not os.path.exists(path):
        return {}
    with open(path, encoding="utf-8") as f:
        return json.load(f).get("details", {})


def analyze(run_dir: str, bin_s: Optional[float] = None,
            threshold: float = 0.95) -> UtilizationReport:
    """Recompute the report of a finished run from its event log.

    ``bin_s`` defaults to the bin width of the existing report, else 60 s.
    """
    path = os.path.join(run_dir, EVENTS)
    if not os.path.exists(path):
        raise MissingArtifacts(path)
    if bin_s is None:
        bin_s = _previous_details(run_dir).get("rate_bin_s", 60.0)
    d = EventDigest().feed(read_events(path))
    report = build_report(d, bin_s, threshold)
    _write_report(run_dir, report)
    return report


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def _write_tsv(path: str, header, columns) -> None:
    cols = [np.asarray(c).tolist() for c in columns]
    with open(path, "w", encoding="utf-8") as f:
        f.write("\t".join(header) + "\n")
        f.writelines("\t".join(_fmt(v) for v in row) + "\n" for row in zip(*cols))


def emit_plots(run_dir: str, bin_s: Optional[float] = None, figures: bool = True) -> List[str]:
    """Write duration, concurrency and rate data files (and figures) for a run.

    Column order is fixed:

    * durations.tsv: ``lo_s hi_s all FUNCTION EXECUTABLE``
    * concurrency.tsv: ``t tasks cores gpus available_cores``; each row holds
      until the next one
    * rate.tsv: ``t_start all FUNCTION EXECUTABLE`` in tasks per hour

    Output depends only on ``events.log`` and ``report.json``.
    """
    path = os.path.join(run_dir, EVENTS)
    if not os.path.exists(path):
        raise MissingArtifacts(path)
    details = _previous_details(run_dir)
    if bin_s is None:
        bin_s = details.get("rate_bin_s", 60.0)
    d = EventDigest().feed(read_events(path))
    if d.n_tasks == 0:
        raise MissingArtifacts("event log holds no completed tasks")
    pools = d.pools()
    start, end, cores, gpus, kind = d.arrays()
    t_end = details.get("t_end", max([float(end.max())] + [p.t_end for p in pools
                                                           if p.t_released is not None]))
    pools = [p if p.t_released is not None else
             NodePool(p.pilot_id, p.nodes, p.t_available, p.t_deadline, min(p.t_deadline, t_end))
             for p in pools]
    written = []

    dur = end - start
    top = float(dur.max()) if dur.max() > 0 else 1.0
    edges = np.linspace(0.0, top, DURATION_BINS + 1)
    counts = {"all": np.histogram(dur, edges)[0]}
    for code, name in enumerate(KINDS):
        counts[name] = np.histogram(dur[kind == code], edges)[0]
    p = os.path.join(run_dir, DURATION_FILE)
    _write_tsv(p, ("lo_s", "hi_s", "all") + KINDS,
               [edges[:-1], edges[1:], counts["all"]] + [counts[k] for k in KINDS])
    written.append(p)

    T, tasks, busy_c, busy_g, avail = concurrency_series(d, pools)
    p = os.path.join(run_dir, CONCURRENCY_FILE)
    _write_tsv(p, ("t", "tasks", "cores", "gpus", "available_cores"),
               [T, tasks, busy_c, busy_g, avail])
    written.append(p)

    t0 = min(pl.t_available for pl in pools) if pools else float(start.min())
    rs = rate_series(d, bin_s, t0, t_end)
    p = os.path.join(run_dir, RATE_FILE)
    _write_tsv(p, ("t_start", "all") + KINDS,
               [rs.edges[:-1], rs.total] + [rs.by_kind[k] for k in KINDS])
    written.append(p)

    if figures:
        from . import plotting

        f = os.path.join(run_dir, "durations.png")
        plotting.plot_durations(edges[:-1], edges[1:], counts, f)
        written.append(f)
        f = os.path.join(run_dir, "concurrency.png")
        plotting.plot_concurrency(T, tasks, busy_c, avail, f)
        written.append(f)
        f = os.path.join(run_dir, "rate.png")
        series = {"all": rs.total}
        series.update({k: rs.by_kind[k] for k in KINDS if rs.by_kind[k].any()})
        plotting.plot_rate(rs.edges, series, f)
        written.append(f)
    return written


def integrate_concurrency(path: str, t0: float, t1: float, column: str = "cores") -> float:
    """Busy resource-seconds over [t0, t1] from a concurrency.tsv file."""
    with open(path, encoding="utf-8") as f:
        header = f.readline().rstrip("\n").split("\t")
        rows = [line.rstrip("\n").split("\t") for line in f]
    ci = header.index(column)
    T = np.array([float(r[0]) for r in rows])
    v = np.array([float(r[ci]) for r in rows])
    lo = np.clip(T[:-1], t0, t1)
    hi = np.clip(T[1:], t0, t1)
    return math.fsum((v[:-1] * (hi - lo)).tolist())
