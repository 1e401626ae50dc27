"""Deterministic discrete-event clock.

Events fire in (time, insertion) order.  The engine is single threaded by
design; determinism of a simulation run follows from this ordering alone.
"""

from __future__ import annotations

import heapq
import itertools
from typing import Any, Callable, List, NamedTuple, Optional


class SimEvent(NamedTuple):
    t: float
    seq: int
    action: Optional[Callable]
    args: tuple


class SimClock:
    def __init__(self, now: float = 0.0):
        self.now = float(now)
        self.event_queue: List[SimEvent] = []
        self._seq = itertools.count()

    def schedule(self, t: float, action: Optional[Callable] = None, *args: Any) -> SimEvent:
        if t < self.now:
            raise ValueError(f"cannot schedule at {t} before now={self.now}")
        ev = SimEvent(float(t), next(self._seq), action, args)
        heapq.heappush(self.event_queue, ev)
        return ev

    def after(self, delay: float, action: Optional[Callable] = None, *args: Any) -> SimEvent:
        return self.schedule(self.now + delay, action, *args)

    def __len__(self) -> int:
        return len(self.event_queue)

    def peek(self) -> Optional[float]:
        return self.event_queue[0].t if self.event_queue else None

    def run_until(self, t_stop: float, collect: bool = True) -> List[SimEvent]:
        """Fire every event with time <= ``t_stop``; afterwards now == t_stop.

        Actions may schedule further events, including at the current time;
        those fire in the same call.
        """
        if t_stop < self.now:
            raise ValueError(f"t_stop={t_stop} is before now={self.now}")
        fired = []
        q = self.event_queue
        pop = heapq.heappop
        while q and q[0].t <= t_stop:
            ev = pop(q)
            self.now = ev.t
            if ev.action is not None:
                ev.action(*ev.args)
            if collect:
                fired.append(ev)
        self.now = float(t_stop)
        return fired

    def run(self) -> float:
        """Drain the queue; returns the time of the last fired event."""
        q = self.event_queue
        pop = heapq.heappop
        while q:
            ev = pop(q)
            self.now = ev.t
            if ev.action is not None:
                ev.action(*ev.args)
        return self.now


def sim_run_until(c: SimClock, t_stop: float) -> List[SimEvent]:
    return c.run_until(t_stop)
