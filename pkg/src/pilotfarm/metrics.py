"""Post-hoc run metrics computed from lifecycle events alone.

Utilization is busy core-seconds over available core-seconds.  The busy
integral is evaluated exactly and rounded once (``math.fsum`` over an exact
decomposition of ``cores * t``), so any other exact integrator of the same
step function yields the same float.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .events import EventRecord
from .resources import Node, NodePool

KINDS = ("FUNCTION", "EXECUTABLE")
_KIND_CODE = {"FUNCTION": 0, "EXECUTABLE": 1}

DEFAULT_THRESHOLD = 0.95


class EmptyWindow(ValueError):
    pass


class NoTasks(ValueError):
    pass


class MissingEvents(ValueError):
    pass


class EventDigest:
    """Incremental reduction of an event stream into task intervals.

    Usable as an :class:`~pilotfarm.events.EventLog` listener so large
    simulated runs never materialize their records.
    """

    def __init__(self):
        self._open: Dict[str, tuple] = {}
        self._uid: List[str] = []
        self._start: List[float] = []
        self._end: List[float] = []
        self._cores: List[int] = []
        self._gpus: List[int] = []
        self._kind: List[int] = []
        self._pilot: List[str] = []
        self.states: Dict[str, int] = {}
        self.pilots: Dict[str, dict] = {}
        self.marks: Dict[str, List[Tuple[float, str]]] = {}
        self.t_first: Optional[float] = None
        self.t_last: Optional[float] = None
        self.n_submitted = 0
        self._arrays = None

    _MARKS = frozenset({"bootstrap_done", "staging_done", "coord_start", "coord_ready",
                        "coord_stop", "worker_start", "shutdown", "drain"})

    def __call__(self, t, kind, eid, event, attrs=None):
        if self.t_first is None:
            self.t_first = t
        self.t_last = t
        if event == "task_start":
            a = attrs or {}
            self._open[eid] = (t, int(a.get("cores", 1)), int(a.get("gpus", 0)),
                               _KIND_CODE.get(a.get("kind"), -1), a.get("pilot", ""))
        elif event == "task_end":
            a = attrs or {}
            st = a.get("state", "DONE")
            self.states[st] = self.states.get(st, 0) + 1
            o = self._open.pop(eid, None)
            if o is not None:
                self._uid.append(eid)
                self._start.append(o[0])
                self._end.append(t)
                self._cores.append(o[1])
                self._gpus.append(o[2])
                self._kind.append(o[3])
                self._pilot.append(o[4])
                self._arrays = None
        elif event == "task_submit":
            self.n_submitted += 1
        elif event == "pilot_active":
            a = attrs or {}
            self.pilots[eid] = {"t_available": t,
                                "n_nodes": int(a.get("nodes", 0)),
                                "cores_per_node": int(a.get("cores_per_node", 0)),
                                "gpus_per_node": int(a.get("gpus_per_node", 0)),
                                "walltime_s": float(a.get("walltime_s", "inf")),
                                "t_done": None}
        elif event == "pilot_done":
            if eid in self.pilots:
                self.pilots[eid]["t_done"] = t
        elif event in self._MARKS:
            self.marks.setdefault(event, []).append((t, eid))

    def feed(self, events: Iterable[EventRecord]) -> "EventDigest":
        for e in events:
            self(e.t, e.entity_kind, e.entity_id, e.event, e.attrs)
        return self

    def arrays(self):
        if self._arrays is None:
            self._arrays = (np.asarray(self._start, dtype=float),
                            np.asarray(self._end, dtype=float),
                            np.asarray(self._cores, dtype=np.int64),
                            np.asarray(self._gpus, dtype=np.int64),
                            np.asarray(self._kind, dtype=np.int8))
        return self._arrays

    @property
    def n_tasks(self) -> int:
        return len(self._start)

    @property
    def pilot_of(self) -> List[str]:
        return self._pilot

    def select(self, pilot: str) -> "EventDigest":
        """Digest restricted to one pilot's tasks and marks."""
        d = EventDigest()
        for i, p in enumerate(self._pilot):
            if p == pilot:
                d._uid.append(self._uid[i])
                d._start.append(self._start[i])
                d._end.append(self._end[i])
                d._cores.append(self._cores[i])
                d._gpus.append(self._gpus[i])
                d._kind.append(self._kind[i])
                d._pilot.append(p)
        if pilot in self.pilots:
            d.pilots[pilot] = dict(self.pilots[pilot])
        prefix = pilot + "."
        for k, v in self.marks.items():
            d.marks[k] = [(t, e) for t, e in v if e == pilot or e.startswith(prefix)]
        d.t_first, d.t_last = self.t_first, self.t_last
        return d

    def pools(self) -> List[NodePool]:
        out = []
        for pid, p in self.pilots.items():
            nodes = [Node(i, p["cores_per_node"], p["gpus_per_node"]) for i in range(p["n_nodes"])]
            wall = p["walltime_s"]
            deadline = p["t_available"] + (wall if math.isfinite(wall) else 1e18)
            out.append(NodePool(pid, nodes, p["t_available"], deadline, p["t_done"]))
        return out


EventsLike = Union[EventDigest, Iterable[EventRecord]]


def digest(events: EventsLike) -> EventDigest:
    if isinstance(events, EventDigest):
        return events
    return EventDigest().feed(events)


def exact_weighted_span(a: np.ndarray, b: np.ndarray, w: np.ndarray) -> float:
    """Correctly rounded value of sum(w * (a - b)) for integer weights w >= 0.

    ``x * 2**j`` is exact in binary floating point, so splitting each weight
    into its set bits turns the weighted sum into a plain sum of floats,
    which ``math.fsum`` rounds exactly once.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    w = np.asarray(w, dtype=np.int64)
    if a.size == 0:
        return 0.0
    terms = []
    j = 0
    rest = w.copy()
    while rest.any():
        m = (rest & 1).astype(bool)
        if m.any():
            s = math.ldexp(1.0, j)
            terms.append(a[m] * s)
            terms.append(-b[m] * s)
        rest >>= 1
        j += 1
    if not terms:
        return 0.0
    return math.fsum(np.concatenate(terms).tolist())


def busy_seconds(d: EventDigest, window: Tuple[float, float], resource: str = "cores") -> float:
    start, end, cores, gpus, _ = d.arrays()
    w = cores if resource == "cores" else gpus
    w0, w1 = window
    lo = np.maximum(start, w0)
    hi = np.minimum(end, w1)
    m = (hi > lo) & (w > 0)
    return exact_weighted_span(hi[m], lo[m], w[m])


def available_seconds(pools: Sequence[NodePool], window: Tuple[float, float],
                      resource: str = "cores") -> float:
    w0, w1 = window
    total = []
    for pool in pools:
        cap = pool.cores if resource == "cores" else pool.gpus
        lo = max(w0, pool.t_available)
        hi = min(w1, pool.t_end)
        if hi > lo and cap:
            total.append(cap * (hi - lo))
    return math.fsum(total)


def _as_pools(pool) -> List[NodePool]:
    if pool is None:
        return []
    if isinstance(pool, NodePool):
        return [pool]
    return list(pool)


def utilization(events: EventsLike, pool: Union[NodePool, Sequence[NodePool], None] = None,
                window: Optional[Tuple[float, float]] = None, resource: str = "cores") -> float:
    """Fraction of available cores (or GPUs) busy with tasks over ``window``.

    With a single pool whose lifetime covers the window this is
    ``sum(cores * overlap) / (pool cores * |window|)``.  With several pools
    the denominator counts each pool only while it is active.
    """
    d = digest(events)
    pools = _as_pools(pool) or d.pools()
    if not pools:
        raise ValueError("no pool given and no pilot_active events found")
    if window is None:
        window = (min(p.t_available for p in pools), max(p.t_end for p in pools))
    w0, w1 = window
    if not w1 > w0:
        raise EmptyWindow(f"window [{w0}, {w1}] is empty")
    if len(pools) == 1:
        p = pools[0]
        cap = p.cores if resource == "cores" else p.gpus
        denom = cap * (w1 - w0)
    else:
        denom = available_seconds(pools, window, resource)
    if not denom > 0:
        raise EmptyWindow("no available capacity in window")
    return busy_seconds(d, window, resource) / denom


@dataclass(frozen=True)
class Phases:
    t_startup_end: float
    t_cooldown_start: float
    peak: float
    t_first_start: float
    t_last_end: float


def step_function(d: EventDigest, weight: str = "tasks") -> Tuple[np.ndarray, np.ndarray]:
    """Concurrency step function: value ``c[k]`` holds on ``[T[k], T[k+1])``."""
    start, end, cores, gpus, _ = d.arrays()
    if weight == "tasks":
        w = np.ones_like(cores)
    elif weight == "cores":
        w = cores
    else:
        w = gpus
    times = np.concatenate([start, end])
    deltas = np.concatenate([w, -w])
    T, inv = np.unique(times, return_inverse=True)
    acc = np.zeros(T.size, dtype=np.int64)
    np.add.at(acc, inv, deltas)
    return T, np.cumsum(acc)


def phase_boundaries(events: EventsLike, threshold: float = DEFAULT_THRESHOLD,
                     weight: str = "tasks") -> Phases:
    """Startup end and cooldown start from the task-concurrency curve.

    Startup ends the first time concurrency reaches ``threshold * peak``;
    cooldown starts when it last drops below that level.  Runs whose peak
    is one task report the full task window.
    """
    d = digest(events)
    if d.n_tasks == 0:
        raise NoTasks("no completed tasks in event stream")
    start, end, *_ = d.arrays()
    first, last = float(start.min()), float(end.max())
    T, c = step_function(d, weight)
    peak = int(c.max()) if c.size else 0
    if peak <= 1:
        return Phases(first, last, float(peak), first, last)
    idx = np.nonzero(c >= threshold * peak)[0]
    return Phases(float(T[idx[0]]), float(T[idx[-1] + 1]), float(peak), first, last)


@dataclass
class RateSeries:
    t0: float
    bin_s: float
    total: np.ndarray
    by_kind: Dict[str, np.ndarray]

    @property
    def edges(self) -> np.ndarray:
        return self.t0 + self.bin_s * np.arange(self.total.size + 1)

    def active(self, values: Optional[np.ndarray] = None) -> np.ndarray:
        """Bins from the first to the last nonzero one, inclusive."""
        v = self.total if values is None else values
        nz = np.nonzero(v)[0]
        if nz.size == 0:
            return v[:0]
        return v[nz[0]:nz[-1] + 1]

    def mean(self, kind: Optional[str] = None) -> float:
        a = self.active(self.total if kind is None else self.by_kind[kind])
        return float(a.mean()) if a.size else 0.0

    def max(self, kind: Optional[str] = None) -> float:
        v = self.total if kind is None else self.by_kind[kind]
        return float(v.max()) if v.size else 0.0


def rate_series(events: EventsLike, bin_s: float, t0: Optional[float] = None,
                t1: Optional[float] = None) -> RateSeries:
    """Task completions per hour in bins of ``bin_s`` seconds."""
    if not bin_s > 0:
        raise ValueError("bin_s must be positive")
    d = digest(events)
    _, end, _, _, kind = d.arrays()
    if t0 is None:
        t0 = float(end.min()) if end.size else 0.0
    if t1 is None:
        t1 = float(end.max()) if end.size else t0
    nbins = max(1, int(math.ceil((t1 - t0) / bin_s)))
    idx = np.floor((end - t0) / bin_s).astype(np.int64)
    keep = (idx >= 0) & (end <= t1)
    idx = np.minimum(idx, nbins - 1)
    scale = 3600.0 / bin_s
    total = np.bincount(idx[keep], minlength=nbins)[:nbins] * scale
    by_kind = {}
    for name, code in _KIND_CODE.items():
        m = keep & (kind == code)
        by_kind[name] = np.bincount(idx[m], minlength=nbins)[:nbins] * scale
    return RateSeries(float(t0), float(bin_s), total, by_kind)


def detect_stalls(series: RateSeries, window: Tuple[float, float], frac: float = 0.1,
                  min_bins: int = 3) -> List[Tuple[float, float]]:
    """Runs of more than ``min_bins`` bins inside ``window`` whose rate falls
    below ``frac`` of the window's mean rate."""
    edges = series.edges
    inside = (edges[:-1] >= window[0]) & (edges[1:] <= window[1])
    idx = np.nonzero(inside)[0]
    if idx.size == 0:
        return []
    mean = float(series.total[idx].mean())
    if mean <= 0:
        return []
    low = series.total < frac * mean
    stalls = []
    run = []
    for i in idx:
        if low[i]:
            run.append(i)
            continue
        if len(run) > min_bins:
            stalls.append((float(edges[run[0]]), float(edges[run[-1] + 1])))
        run = []
    if len(run) > min_bins:
        stalls.append((float(edges[run[0]]), float(edges[run[-1] + 1])))
    return stalls


@dataclass
class StartupBreakdown:
    components: Dict[str, float]
    t_first_task: float
    overlaps: List[str] = field(default_factory=list)

    def critical_path(self) -> float:
        c = self.components
        return (max(c["pilot_bootstrap"], c["staging"]) + c["coordinator_startup"]
                + c["input_preprocessing"] + c["worker_launch_first"] + c["first_task_latency"])


def _first(marks, name, default=None):
    v = marks.get(name)
    return min(t for t, _ in v) if v else default


def startup_breakdown(events: EventsLike, pilot: Optional[str] = None) -> StartupBreakdown:
    """Split the time from pilot activation to the first task start.

    Bootstrap and staging overlap, as do worker launch spread and task
    execution; both overlaps are annotated.  The components on the critical
    path (the larger of bootstrap/staging, coordinator startup, input
    pre-processing, first worker launch, first-task latency) sum to
    ``t_first_task``.
    """
    d = digest(events)
    if pilot is not None:
        d = d.select(pilot)
    if not d.pilots:
        raise MissingEvents("pilot_active")
    t0 = min(p["t_available"] for p in d.pilots.values())
    m = d.marks
    for name in ("coord_start", "worker_start"):
        if not m.get(name):
            raise MissingEvents(name)
    if d.n_tasks == 0:
        raise MissingEvents("task_start")
    t_boot = _first(m, "bootstrap_done", t0)
    t_stage = _first(m, "staging_done", t0)
    agent_ready = max(t_boot, t_stage)
    t_coord = _first(m, "coord_start")
    t_ready = _first(m, "coord_ready", t_coord)
    ws = [t for t, _ in m["worker_start"]]
    w_first, w_last = min(ws), max(ws)
    start = d.arrays()[0]
    t_task = float(start.min())
    comps = {
        "pilot_bootstrap": t_boot - t0,
        "staging": t_stage - t0,
        "coordinator_startup": max(0.0, t_coord - agent_ready),
        "input_preprocessing": max(0.0, t_ready - t_coord),
        "worker_launch_first": max(0.0, w_first - t_ready),
        "worker_launch_spread": w_last - w_first,
        "first_task_latency": t_task - w_first,
    }
    overlaps = ["pilot_bootstrap || staging",
                "worker_launch_spread || task execution"]
    return StartupBreakdown(comps, t_task - t0, overlaps)


def task_time_stats(d: EventDigest) -> Tuple[float, float]:
    start, end, *_ = d.arrays()
    if start.size == 0:
        return 0.0, 0.0
    dur = end - start
    return float(dur.max()), float(dur.mean())


def concurrency_series(d: EventDigest, pools: Sequence[NodePool]):
    """Rows (t, tasks, cores, gpus, available_cores); each row holds until the next."""
    start, end, cores, gpus, _ = d.arrays()
    times = [start, end]
    for p in pools:
        times.append(np.array([p.t_available, p.t_end]))
    T = np.unique(np.concatenate(times))
    def level(w):
        acc = np.zeros(T.size, dtype=np.int64)
        np.add.at(acc, np.searchsorted(T, start), w)
        np.add.at(acc, np.searchsorted(T, end), -w)
        return np.cumsum(acc)
    tasks = level(np.ones_like(cores))
    busy_c = level(cores)
    busy_g = level(gpus)
    avail = np.zeros(T.size, dtype=np.int64)
    for p in pools:
        avail += np.where((T >= p.t_available) & (T < p.t_end), p.cores, 0)
    return T, tasks, busy_c, busy_g, avail


SUMMARY_FIELDS = ("Nodes", "Pilots", "Tasks", "Startup [s]", "1st Task [s]",
                 "Utilization avg", "Utilization steady", "Task Time max [s]",
                 "Task Time mean [s]", "Rate max [/h]", "Rate mean [/h]")


@dataclass
class UtilizationReport:
    nodes: int
    pilots: int
    tasks: int
    avg: float
    steady: float
    t_available: float
    t_end: float
    t_startup_end: float
    t_cooldown_start: float
    t_startup: float
    t_cooldown: float
    t_first_task: float
    task_time_max: float
    task_time_mean: float
    rate_max: float
    rate_mean: float
    rate_bin_s: float
    threshold: float
    peak_concurrency: float
    states: Dict[str, int] = field(default_factory=dict)
    kind_rates: Dict[str, Dict[str, float]] = field(default_factory=dict)
    startup_breakdown: Optional[Dict[str, float]] = None
    startup_overlaps: List[str] = field(default_factory=list)
    stalls: List[Tuple[float, float]] = field(default_factory=list)
    gpu_avg: Optional[float] = None
    gpu_steady: Optional[float] = None
    per_pilot: Dict[str, Dict[str, float]] = field(default_factory=dict)

    def summary_row(self) -> Dict[str, float]:
        return dict(zip(SUMMARY_FIELDS, (
            self.nodes, self.pilots, self.tasks, self.t_startup, self.t_first_task,
            self.avg, self.steady, self.task_time_max, self.task_time_mean,
            self.rate_max, self.rate_mean)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stalls"] = [list(s) for s in self.stalls]
        return {"summary": self.summary_row(), "details": d}

    def to_table(self) -> str:
        row = self.summary_row()
        fmt = {"Utilization avg": "{:.1%}", "Utilization steady": "{:.1%}",
               "Nodes": "{:d}", "Pilots": "{:d}", "Tasks": "{:d}"}
        cells = [fmt.get(k, "{:.1f}").format(v) for k, v in row.items()]
        widths = [max(len(k), len(c)) for k, c in zip(row, cells)]
        head = "  ".join(k.rjust(w) for k, w in zip(row, widths))
        body = "  ".join(c.rjust(w) for c, w in zip(cells, widths))
        lines = [head, body]
        if self.startup_breakdown:
            lines.append("")
            lines.append("startup breakdown [s]:")
            for k, v in self.startup_breakdown.items():
                lines.append(f"  {k:<22} {v:10.3f}")
            for o in self.startup_overlaps:
                lines.append(f"  overlap: {o}")
        if self.stalls:
            lines.append("")
            for a, b in self.stalls:
                lines.append(f"stall: {a:.1f}s .. {b:.1f}s")
        return "\n".join(lines) + "\n"


def build_report(events: EventsLike, bin_s: float = 60.0,
                 threshold: float = DEFAULT_THRESHOLD,
                 pools: Optional[Sequence[NodePool]] = None) -> UtilizationReport:
    d = digest(events)
    if d.n_tasks == 0:
        raise NoTasks("no completed tasks in event stream")
    pools = list(pools) if pools else d.pools()
    start, end, *_ = d.arrays()
    if not pools:
        raise MissingEvents("pilot_active")
    t_av = min(p.t_available for p in pools)
    t_end = max([float(end.max())] + [p.t_released for p in pools if p.t_released is not None])
    # a pilot with no pilot_done record ends with the log
    pools = [p if p.t_released is not None else
             NodePool(p.pilot_id, p.nodes, p.t_available, p.t_deadline, min(p.t_deadline, t_end))
             for p in pools]
    ph = phase_boundaries(d, threshold)
    avg = utilization(d, pools, (t_av, t_end))
    if ph.t_cooldown_start > ph.t_startup_end:
        steady = utilization(d, pools, (ph.t_startup_end, ph.t_cooldown_start))
    else:
        steady = avg
    series = rate_series(d, bin_s, t_av, t_end)
    tmax, tmean = task_time_stats(d)
    kind_rates = {}
    _, _, _, _, kind = d.arrays()
    for k in KINDS:
        n = int((kind == _KIND_CODE[k]).sum())
        if n:
            kind_rates[k] = {"count": n, "mean": series.mean(k), "max": series.max(k)}
    try:
        sb = startup_breakdown(d)
        breakdown, overlaps = sb.components, sb.overlaps
    except MissingEvents:
        breakdown, overlaps = None, []
    gpu_avg = gpu_steady = None
    if any(p.gpus for p in pools):
        gpu_avg = utilization(d, pools, (t_av, t_end), "gpus")
        gpu_steady = (utilization(d, pools, (ph.t_startup_end, ph.t_cooldown_start), "gpus")
                      if ph.t_cooldown_start > ph.t_startup_end else gpu_avg)
    per_pilot = {}
    if len(pools) > 1:
        for p in pools:
            sub = d.select(p.pilot_id)
            if sub.n_tasks == 0:
                continue
            s = rate_series(sub, bin_s, t_av, t_end)
            per_pilot[p.pilot_id] = {
                "tasks": sub.n_tasks,
                "avg": utilization(sub, p, (p.t_available, p.t_end)),
                "rate_max": s.max(), "rate_mean": s.mean()}
    return UtilizationReport(
        nodes=sum(len(p.nodes) for p in pools), pilots=len(pools), tasks=d.n_tasks,
        avg=avg, steady=steady, t_available=t_av, t_end=t_end,
        t_startup_end=ph.t_startup_end, t_cooldown_start=ph.t_cooldown_start,
        t_startup=ph.t_startup_end - t_av, t_cooldown=t_end - ph.t_cooldown_start,
        t_first_task=float(start.min()) - t_av,
        task_time_max=tmax, task_time_mean=tmean,
        rate_max=series.max(), rate_mean=series.mean(), rate_bin_s=bin_s,
        threshold=threshold, peak_concurrency=ph.peak, states=dict(d.states),
        kind_rates=kind_rates, startup_breakdown=breakdown, startup_overlaps=overlaps,
        stalls=detect_stalls(series, (ph.t_startup_end, ph.t_cooldown_start)),
        gpu_avg=gpu_avg, gpu_steady=gpu_steady, per_pilot=per_pilot)
