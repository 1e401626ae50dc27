"""Domain types shared by the scheduler, coordinator, worker and harness.

Everything here is plain data: immutable after construction and cheap to
serialize to the JSON value trees carried by the wire protocol.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping, Optional, Sequence, Union


class ValidationError(ValueError):
    """A task or config field violates its contract."""

    def __init__(self, field: str, reason: str):
        super().__init__(f"{field}: {reason}")
        self.field = field
        self.reason = reason


class IllegalTransition(RuntimeError):
    def __init__(self, state: "TaskState", event: str):
        super().__init__(f"illegal transition from {state.value} on {event!r}")
        self.state = state
        self.event = event


class TaskKind(str, Enum):
    FUNCTION = "FUNCTION"
    EXECUTABLE = "EXECUTABLE"


class TaskState(str, Enum):
    SUBMITTED = "SUBMITTED"
    SCHEDULED = "SCHEDULED"
    DISPATCHED = "DISPATCHED"
    RUNNING = "RUNNING"
    DONE = "DONE"
    FAILED = "FAILED"
    CANCELED = "CANCELED"

    @property
    def terminal(self) -> bool:
        return self in TERMINAL_STATES


TERMINAL_STATES = frozenset({TaskState.DONE, TaskState.FAILED, TaskState.CANCELED})


class TaskEvent(str, Enum):
    SCHEDULE = "schedule"
    DISPATCH = "dispatch"
    START = "start"
    DONE = "done"
    FAIL = "fail"
    # the task was outstanding on a worker that disappeared; the coordinator
    # cannot tell whether it ever started
    LOST = "lost"
    CANCEL = "cancel"


_EVENT_ALIASES = {
    "scheduled": TaskEvent.SCHEDULE,
    "dispatched": TaskEvent.DISPATCH,
    "started": TaskEvent.START,
    "finish": TaskEvent.DONE,
    "finished": TaskEvent.DONE,
    "failed": TaskEvent.FAIL,
    "canceled": TaskEvent.CANCEL,
    "cancelled": TaskEvent.CANCEL,
}

_TRANSITIONS = {
    (TaskState.SUBMITTED, TaskEvent.SCHEDULE): TaskState.SCHEDULED,
    (TaskState.SCHEDULED, TaskEvent.DISPATCH): TaskState.DISPATCHED,
    (TaskState.DISPATCHED, TaskEvent.START): TaskState.RUNNING,
    (TaskState.RUNNING, TaskEvent.DONE): TaskState.DONE,
    (TaskState.RUNNING, TaskEvent.FAIL): TaskState.FAILED,
    (TaskState.DISPATCHED, TaskEvent.LOST): TaskState.FAILED,
    (TaskState.RUNNING, TaskEvent.LOST): TaskState.FAILED,
}


def _as_event(e: Union[TaskEvent, str]) -> TaskEvent:
    if isinstance(e, TaskEvent):
        return e
    try:
        return TaskEvent(e)
    except ValueError:
        pass
    try:
        return _EVENT_ALIASES[e]
    except KeyError:
        raise ValueError(f"unknown lifecycle event {e!r}") from None


def transition(state: TaskState, event: Union[TaskEvent, str]) -> TaskState:
    """Return the state reached from ``state`` on ``event``.

    Terminal states absorb nothing: any event on DONE/FAILED/CANCELED raises
    :class:`IllegalTransition`, as does an out-of-order forward event.
    """
    ev = _as_event(event)
    if state.terminal:
        raise IllegalTransition(state, ev.value)
    if ev is TaskEvent.CANCEL:
        return TaskState.CANCELED
    try:
        return _TRANSITIONS[(state, ev)]
    except KeyError:
        raise IllegalTransition(state, ev.value) from None


@dataclass(frozen=True)
class FunctionCall:
    function_name: str
    args: Any = None

    def to_dict(self) -> dict:
        return {"function_name": self.function_name, "args": self.args}

    @classmethod
    def from_dict(cls, d: Mapping) -> "FunctionCall":
        return cls(d["function_name"], d.get("args"))


@dataclass(frozen=True)
class ExecSpec:
    argv: tuple
    env: Mapping[str, str] = field(default_factory=dict)
    capture_output: bool = False

    def __post_init__(self):
        # lists arrive from JSON; keep the value hashable and immutable
        if not isinstance(self.argv, tuple):
            object.__setattr__(self, "argv", tuple(self.argv))

    def to_dict(self) -> dict:
        return {"argv": list(self.argv), "env": dict(self.env),
                "capture_output": self.capture_output}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExecSpec":
        return cls(tuple(d["argv"]), dict(d.get("env") or {}),
                   bool(d.get("capture_output", False)))


@dataclass(frozen=True)
class TaskDescription:
    uid: str
    kind: TaskKind
    payload: Union[FunctionCall, ExecSpec]
    cores: int = 1
    gpus: int = 0
    timeout_s: Optional[float] = None
    tags: Mapping[str, str] = field(default_factory=dict)

    @classmethod
    def function(cls, uid: str, name: str, args: Any = None, **kw) -> "TaskDescription":
        return cls(uid, TaskKind.FUNCTION, FunctionCall(name, args), **kw)

    @classmethod
    def executable(cls, uid: str, argv: Sequence[str], env=None,
                   capture_output: bool = False, **kw) -> "TaskDescription":
        return cls(uid, TaskKind.EXECUTABLE,
                   ExecSpec(tuple(argv), dict(env or {}), capture_output), **kw)

    def to_dict(self) -> dict:
        d = {"uid": self.uid, "kind": self.kind.value,
             "payload": self.payload.to_dict(),
             "cores": self.cores, "gpus": self.gpus}
        if self.timeout_s is not None:
            d["timeout_s"] = self.timeout_s
        if self.tags:
            d["tags"] = dict(self.tags)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TaskDescription":
        kind = TaskKind(d["kind"])
        if kind is TaskKind.FUNCTION:
            payload = FunctionCall.from_dict(d["payload"])
        else:
            payload = ExecSpec.from_dict(d["payload"])
        return cls(d["uid"], kind, payload, d.get("cores", 1), d.get("gpus", 0),
                   d.get("timeout_s"), dict(d.get("tags") or {}))


def is_value_tree(v: Any, _depth: int = 0) -> bool:
    """True if ``v`` is a finite JSON-compatible tree."""
    if _depth > 64:
        return False
    if v is None or isinstance(v, (bool, str)):
        return True
    if isinstance(v, int):
        return True
    if isinstance(v, float):
        return math.isfinite(v)
    if isinstance(v, (list, tuple)):
        return all(is_value_tree(x, _depth + 1) for x in v)
    if isinstance(v, dict):
        return all(isinstance(k, str) and is_value_tree(x, _depth + 1)
                   for k, x in v.items())
    return False


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def validate_task(t: TaskDescription, registry=None) -> None:
    """Raise :class:`ValidationError` naming the first violated field.

    ``registry`` (a :class:`pilotfarm.worker.FunctionRegistry`) is optional;
    when given, FUNCTION tasks must name a registered function and their
    arguments must bind to its signature.
    """
    if not isinstance(t.uid, str) or not t.uid:
        raise ValidationError("uid", "must be a non-empty string")
    try:
        kind = TaskKind(t.kind)
    except ValueError:
        raise ValidationError("kind", f"unknown kind {t.kind!r}") from None
    if not _is_int(t.cores) or t.cores < 1:
        raise ValidationError("cores", f"must be an integer >= 1, got {t.cores!r}")
    if not _is_int(t.gpus) or t.gpus < 0:
        raise ValidationError("gpus", f"must be an integer >= 0, got {t.gpus!r}")
    if t.timeout_s is not None:
        if not isinstance(t.timeout_s, (int, float)) or not t.timeout_s > 0 \
                or not math.isfinite(t.timeout_s):
            raise ValidationError("timeout_s", "must be a positive number of seconds")
    if kind is TaskKind.FUNCTION:
        if not isinstance(t.payload, FunctionCall):
            raise ValidationError("payload", "FUNCTION task needs a FunctionCall")
        name = t.payload.function_name
        if not isinstance(name, str) or not name:
            raise ValidationError("function_name", "must be a non-empty string")
        if not is_value_tree(t.payload.args):
            raise ValidationError("args", "not a finite serializable value tree")
        if registry is not None:
            registry.check_call(t.payload)
    else:
        if not isinstance(t.payload, ExecSpec):
            raise ValidationError("payload", "EXECUTABLE task needs an ExecSpec")
        if len(t.payload.argv) == 0:
            raise ValidationError("argv", "must be non-empty")
        if not all(isinstance(a, str) for a in t.payload.argv) or not t.payload.argv[0]:
            raise ValidationError("argv", "argv[0] must be a non-empty string")
        if not all(isinstance(k, str) and isinstance(v, str)
                   for k, v in t.payload.env.items()):
            raise ValidationError("env", "must map strings to strings")
    if not all(isinstance(k, str) and isinstance(v, str) for k, v in t.tags.items()):
        raise ValidationError("tags", "must map strings to strings")


TIMESTAMP_ORDER = ("submit", "schedule", "dispatch", "start", "end")


@dataclass(frozen=True)
class TaskResult:
    uid: str
    state: TaskState
    exit_code: Optional[int] = None
    value: Any = None
    error_text: Optional[str] = None
    timestamps: Mapping[str, float] = field(default_factory=dict)
    worker_id: Optional[str] = None
    node_id: Optional[int] = None
    kind: Optional[TaskKind] = None

    @property
    def duration(self) -> Optional[float]:
        ts = self.timestamps
        if "start" in ts and "end" in ts:
            return ts["end"] - ts["start"]
        return None

    def to_dict(self) -> dict:
        d = {"uid": self.uid, "state": self.state.value,
             "timestamps": dict(self.timestamps)}
        for name in ("exit_code", "value", "error_text", "worker_id", "node_id"):
            v = getattr(self, name)
            if v is not None:
                d[name] = v
        if self.kind is not None:
            d["kind"] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TaskResult":
        kind = d.get("kind")
        return cls(d["uid"], TaskState(d["state"]), d.get("exit_code"), d.get("value"),
                   d.get("error_text"), dict(d.get("timestamps") or {}),
                   d.get("worker_id"), d.get("node_id"),
                   TaskKind(kind) if kind is not None else None)


def check_result(r: TaskResult) -> None:
    """Assert the result invariants: terminal state, ordered timestamps."""
    if not r.state.terminal:
        raise ValidationError("state", f"{r.state.value} is not terminal")
    seen = [(k, r.timestamps[k]) for k in TIMESTAMP_ORDER if k in r.timestamps]
    for (ka, a), (kb, b) in zip(seen, seen[1:]):
        if a > b:
            raise ValidationError("timestamps", f"{ka}={a} > {kb}={b}")


class Backend(str, Enum):
    LOCAL = "LOCAL"
    SIM = "SIM"


@dataclass(frozen=True)
class PilotDescription:
    pilot_id: str
    n_nodes: int
    cores_per_node: int
    gpus_per_node: int = 0
    walltime_s: float = 86400.0
    backend: Backend = Backend.SIM
    available_at_s: float = 0.0

    @property
    def cores(self) -> int:
        return self.n_nodes * self.cores_per_node

    @property
    def gpus(self) -> int:
        return self.n_nodes * self.gpus_per_node

    def validate(self) -> None:
        if not isinstance(self.pilot_id, str) or not self.pilot_id:
            raise ValidationError("pilot_id", "must be a non-empty string")
        if not _is_int(self.n_nodes) or self.n_nodes < 1:
            raise ValidationError("n_nodes", "must be an integer >= 1")
        if not _is_int(self.cores_per_node) or self.cores_per_node < 1:
            raise ValidationError("cores_per_node", "must be an integer >= 1")
        if not _is_int(self.gpus_per_node) or self.gpus_per_node < 0:
            raise ValidationError("gpus_per_node", "must be an integer >= 0")
        if not self.walltime_s > 0:
            raise ValidationError("walltime_s", "must be positive")
        if not self.available_at_s >= 0:
            raise ValidationError("available_at_s", "must be >= 0")

    def to_dict(self) -> dict:
        return {"pilot_id": self.pilot_id, "n_nodes": self.n_nodes,
                "cores_per_node": self.cores_per_node,
                "gpus_per_node": self.gpus_per_node, "walltime_s": self.walltime_s,
                "backend": self.backend.value, "available_at_s": self.available_at_s}

    @classmethod
    def from_dict(cls, d: Mapping) -> "PilotDescription":
        return cls(d["pilot_id"], d["n_nodes"], d["cores_per_node"],
                   d.get("gpus_per_node", 0), d.get("walltime_s", 86400.0),
                   Backend(str(d.get("backend", "SIM")).upper()),
                   d.get("available_at_s", 0.0))


@dataclass(frozen=True)
class CoordinatorConfig:
    n_workers: int
    cpn: int
    gpn: int = 0
    bulk_size: int = 128
    worker_descr: Optional[TaskDescription] = None
    # cores held by the coordinator process itself; 0 means it runs outside
    # the pilot's slot accounting
    coordinator_cores: int = 0

    def validate(self, pilot: Optional[PilotDescription] = None) -> None:
        if not _is_int(self.n_workers) or self.n_workers < 1:
            raise ValidationError("n_workers", "must be an integer >= 1")
        if not _is_int(self.cpn) or self.cpn < 1:
            raise ValidationError("cpn", "must be an integer >= 1")
        if not _is_int(self.gpn) or self.gpn < 0:
            raise ValidationError("gpn", "must be an integer >= 0")
        if not _is_int(self.bulk_size) or self.bulk_size < 1:
            raise ValidationError("bulk_size", "must be an integer >= 1")
        if not _is_int(self.coordinator_cores) or self.coordinator_cores < 0:
            raise ValidationError("coordinator_cores", "must be an integer >= 0")
        if pilot is not None:
            if self.cpn > pilot.cores_per_node or self.gpn > pilot.gpus_per_node:
                raise ValidationError("cpn", "a worker cannot span more than one node")

    def to_dict(self) -> dict:
        d = {"n_workers": self.n_workers, "cpn": self.cpn, "gpn": self.gpn,
             "bulk_size": self.bulk_size, "coordinator_cores": self.coordinator_cores}
        if self.worker_descr is not None:
            d["worker_descr"] = self.worker_descr.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "CoordinatorConfig":
        wd = d.get("worker_descr")
        return cls(d["n_workers"], d["cpn"], d.get("gpn", 0), d.get("bulk_size", 128),
                   TaskDescription.from_dict(wd) if wd else None,
                   d.get("coordinator_cores", 0))
