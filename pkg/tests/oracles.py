"""Independent reference computations used to check pilotfarm.metrics.

Written from the definitions only, with exact rational arithmetic, and
sharing no code with the package.
"""

from fractions import Fraction


def intervals(records):
    """(start, end, cores) per task from raw start/end records."""
    open_, out = {}, []
    for r in records:
        if r.event == "task_start":
            open_[r.entity_id] = (r.t, int(r.attrs.get("cores", 1)))
        elif r.event == "task_end" and r.entity_id in open_:
            s, c = open_.pop(r.entity_id)
            out.append((s, r.t, c))
    return out


def sweep_busy(records, w0, w1):
    """Busy core-seconds in [w0, w1], sweeping start/end events in time order."""
    ev = []
    for s, e, c in intervals(records):
        ev.append((Fraction(s), c))
        ev.append((Fraction(e), -c))
    ev.sort()
    lo, hi = Fraction(w0), Fraction(w1)
    busy, level, t_prev = Fraction(0), 0, None
    for t, dc in ev:
        if t_prev is not None:
            a, b = max(t_prev, lo), min(t, hi)
            if b > a:
                busy += level * (b - a)
        level += dc
        t_prev = t
    return busy


def brute_utilization(records, cap, w0, w1):
    return float(sweep_busy(records, w0, w1) / (cap * (Fraction(w1) - Fraction(w0))))


def scan_phases(records, threshold=0.95):
    """(first time concurrency >= threshold*peak, last time it drops below)."""
    iv = intervals(records)
    times = sorted({t for s, e, _ in iv for t in (s, e)})

    def conc(t):
        return sum(1 for s, e, _ in iv if s <= t < e)

    levels = [(t, conc(t)) for t in times]
    peak = max(c for _, c in levels)
    first = min(s for s, _, _ in iv)
    last = max(e for _, e, _ in iv)
    if peak <= 1:
        return first, last
    hits = [k for k, (_, c) in enumerate(levels) if c >= threshold * peak]
    return levels[hits[0]][0], levels[hits[-1] + 1][0]
