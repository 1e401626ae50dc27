"""Append-only lifecycle event logs.

One record per line, tab separated::

    t <TAB> entity_kind <TAB> entity_id <TAB> event [<TAB> key=value ...]

``t`` is written with ``repr`` so a parsed log reproduces the in-memory
float exactly.  Attribute values escape backslash, tab and newline.
"""

from __future__ import annotations

import os
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, List, Mapping, Optional, TextIO, Tuple, Union

ENTITY_KINDS = ("pilot", "coordinator", "worker", "task")


@dataclass(frozen=True)
class EventRecord:
    t: float
    entity_kind: str
    entity_id: str
    event: str
    attrs: Mapping[str, str] = field(default_factory=dict)

    def to_line(self) -> str:
        return format_line(self.t, self.entity_kind, self.entity_id, self.event, self.attrs)


def _esc(v) -> str:
    s = v if isinstance(v, str) else str(v)
    if "\\" in s or "\t" in s or "\n" in s:
        s = s.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n")
    return s


def _unesc(s: str) -> str:
    if "\\" not in s:
        return s
    out = []
    it = iter(s)
    for ch in it:
        if ch == "\\":
            nxt = next(it, "")
            out.append({"t": "\t", "n": "\n", "\\": "\\"}.get(nxt, nxt))
        else:
            out.append(ch)
    return "".join(out)


def format_line(t: float, kind: str, eid: str, event: str,
                attrs: Optional[Mapping] = None) -> str:
    head = f"{float(t)!r}\t{kind}\t{eid}\t{event}"
    if attrs:
        return head + "\t" + "\t".join(f"{k}={_esc(v)}" for k, v in attrs.items()) + "\n"
    return head + "\n"


def parse_line(line: str) -> EventRecord:
    parts = line.rstrip("\n").split("\t")
    if len(parts) < 4:
        raise ValueError(f"malformed event line: {line!r}")
    attrs = {}
    for kv in parts[4:]:
        k, sep, v = kv.partition("=")
        if not sep:
            raise ValueError(f"malformed attribute {kv!r}")
        attrs[k] = _unesc(v)
    return EventRecord(float(parts[0]), parts[1], parts[2], parts[3], attrs)


def read_events(path: Union[str, os.PathLike]) -> Iterator[EventRecord]:
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                yield parse_line(line)


def merge_logs(paths: Iterable[Union[str, os.PathLike]], out: Union[str, os.PathLike]) -> int:
    """Concatenate per-process logs and sort by (t, entity_id); stable otherwise."""
    recs = []
    for p in paths:
        with open(p, "r", encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    head = line.split("\t", 3)
                    recs.append((float(head[0]), head[2], len(recs), line))
    recs.sort()
    with open(out, "w", encoding="utf-8") as f:
        f.writelines(r[3] for r in recs)
    return len(recs)


class WallClock:
    """Monotonic clock mapped to the epoch once, at construction.

    Processes on one host that share an ``anchor`` (epoch, monotonic) pair
    produce mutually consistent timestamps, since the monotonic clock is
    system wide.
    """

    def __init__(self, anchor: Optional[Tuple[float, float]] = None):
        if anchor is None:
            anchor = (time.time(), time.monotonic())
        self._epoch0, self._mono0 = anchor

    @property
    def anchor(self) -> Tuple[float, float]:
        return self._epoch0, self._mono0

    def __call__(self) -> float:
        return self._epoch0 + (time.monotonic() - self._mono0)


Listener = Callable[[float, str, str, str, Optional[Mapping]], None]


class EventLog:
    """Single-writer event sink.

    Records go to ``path`` (buffered), to an in-memory list when ``keep`` is
    set, and to every registered listener.
    """

    def __init__(self, path: Optional[Union[str, os.PathLike]] = None, keep: bool = False,
                 clock: Optional[Callable[[], float]] = None, flush_every: int = 65536):
        self.path = path
        self._f: Optional[TextIO] = open(path, "w", encoding="utf-8") if path else None
        self._buf: List[str] = []
        self._flush_every = flush_every
        self.records: Optional[List[EventRecord]] = [] if keep else None
        self.listeners: List[Listener] = []
        self.clock = clock
        self.count = 0
        self._lock = threading.Lock()

    def emit(self, t: float, kind: str, eid: str, event: str,
             attrs: Optional[Mapping] = None) -> None:
        with self._lock:
            self.count += 1
            if self._f is not None:
                self._buf.append(format_line(t, kind, eid, event, attrs))
                if len(self._buf) >= self._flush_every:
                    self._f.writelines(self._buf)
                    self._buf.clear()
            if self.records is not None:
                self.records.append(EventRecord(
                    float(t), kind, eid, event,
                    {k: str(v) for k, v in attrs.items()} if attrs else {}))
            for fn in self.listeners:
                fn(t, kind, eid, event, attrs)

    def now(self, kind: str, eid: str, event: str, attrs: Optional[Mapping] = None) -> float:
        t = self.clock()
        self.emit(t, kind, eid, event, attrs)
        return t

    def flush(self) -> None:
        with self._lock:
            if self._f is not None:
                self._f.writelines(self._buf)
                self._buf.clear()
                self._f.flush()

    def close(self) -> None:
        self.flush()
        if self._f is not None:
            self._f.close()
            self._f = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
