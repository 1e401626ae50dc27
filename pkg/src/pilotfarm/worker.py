"""Single-node executor.

A worker owns ``cores``/``gpus`` slots on one node.  Function tasks are calls
into a :class:`FunctionRegistry`; executable tasks are child processes.  Both
run on a thread pool sized to the core count, results travel back to the
coordinator in batches, and every freed slot is advertised as CREDIT.

Function timeouts are reported on time, but a registered function only stops
early if it honours its ``cancel`` token; until it returns, its slots stay
reserved.
"""

from __future__ import annotations

import argparse
import importlib
import inspect
import logging
import os
import signal
import socket
import subprocess
import sys
import threading
import time
import traceback
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Deque, Dict, List, Optional, Tuple

from .events import EventLog, WallClock
from .model import (ExecSpec, FunctionCall, TaskDescription, TaskKind, TaskResult,
                    TaskState, ValidationError)
from .protocol import FrameDecoder, MessageType, ProtocolError, Sender

log = logging.getLogger(__name__)

LOCAL_GRACE_S = 1.0


class UnknownFunction(LookupError):
    pass


class SpawnError(OSError):
    pass


class CancelToken(threading.Event):
    """Event with a reason and callbacks run once when set."""

    def __init__(self):
        super().__init__()
        self.reason: Optional[str] = None
        self._callbacks: List[Callable[[], None]] = []
        self._cb_lock = threading.Lock()

    def cancel(self, reason: str = "cancel") -> None:
        with self._cb_lock:
            if self.is_set():
                return
            self.reason = reason
            super().set()
            cbs, self._callbacks = self._callbacks, []
        for cb in cbs:
            try:
                cb()
            except Exception:  # noqa: BLE001 - a dead child must not kill the worker
                log.exception("cancel callback failed")

    def on_cancel(self, cb: Callable[[], None]) -> None:
        with self._cb_lock:
            if not self.is_set():
                self._callbacks.append(cb)
                return
        cb()

    def discard(self, cb: Callable[[], None]) -> None:
        with self._cb_lock:
            if cb in self._callbacks:
                self._callbacks.remove(cb)


@dataclass(frozen=True)
class FunctionEntry:
    name: str
    fn: Callable
    signature: inspect.Signature
    accepts_cancel: bool


class FunctionRegistry:
    """Named functions a worker can call; read-only once workers start."""

    def __init__(self):
        self._entries: Dict[str, FunctionEntry] = {}

    def register(self, fn: Optional[Callable] = None, *, name: Optional[str] = None):
        def deco(f):
            sig = inspect.signature(f)
            self._entries[name or f.__name__] = FunctionEntry(
                name or f.__name__, f, sig, "cancel" in sig.parameters)
            return f
        return deco(fn) if fn is not None else deco

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def names(self) -> List[str]:
        return sorted(self._entries)

    def lookup(self, name: str) -> FunctionEntry:
        try:
            return self._entries[name]
        except KeyError:
            raise UnknownFunction(name) from None

    @staticmethod
    def split_args(args: Any) -> Tuple[tuple, dict]:
        if args is None:
            return (), {}
        if isinstance(args, dict):
            return (), dict(args)
        if isinstance(args, (list, tuple)):
            return tuple(args), {}
        return (args,), {}

    def check_call(self, call: FunctionCall) -> None:
        """Raise ValidationError unless ``call`` names a function and binds."""
        if call.function_name not in self._entries:
            raise ValidationError("function_name", f"{call.function_name!r} is not registered")
        entry = self._entries[call.function_name]
        a, kw = self.split_args(call.args)
        if entry.accepts_cancel:
            kw = dict(kw, cancel=None)
        try:
            entry.signature.bind(*a, **kw)
        except TypeError as e:
            raise ValidationError("args", str(e)) from None


REGISTRY = FunctionRegistry()


@REGISTRY.register
def noop():
    return None


@REGISTRY.register
def echo(value=None):
    return value


@REGISTRY.register
def sleep(seconds: float, cancel=None):
    """Sleep cooperatively; the token cuts it short."""
    if cancel is None:
        time.sleep(seconds)
    else:
        cancel.wait(seconds)
    return seconds


@REGISTRY.register
def sleep_then_ok(t: float = 0.0, cancel=None):
    sleep(t, cancel)
    return "ok"


@REGISTRY.register
def fail(message: str = "boom"):
    raise RuntimeError(message)


@REGISTRY.register
def synthetic_dock(duration: float, score: float = 0.0, cancel=None):
    """Stand-in for a docking call: busy for ``duration`` seconds."""
    sleep(duration, cancel)
    return {"score": score}


def _error_text(exc: BaseException) -> str:
    return "".join(traceback.format_exception_only(type(exc), exc)).strip()


def run_function(registry: FunctionRegistry, call: FunctionCall,
                 timeout_s: Optional[float] = None, *, uid: str = "",
                 cancel: Optional[CancelToken] = None,
                 clock: Callable[[], float] = time.time) -> Tuple[TaskResult, Optional[threading.Thread]]:
    """Call a registered function.

    Returns the result and, when a timed-out call is still running, its
    thread; the caller must keep the call's slots reserved until it exits.
    """
    entry = registry.lookup(call.function_name)
    cancel = cancel or CancelToken()
    a, kw = registry.split_args(call.args)
    if entry.accepts_cancel:
        kw["cancel"] = cancel
    box: Dict[str, Any] = {}

    def target():
        try:
            box["value"] = entry.fn(*a, **kw)
        except BaseException as e:  # noqa: BLE001 - isolate the worker from task code
            box["error"] = e

    start = clock()
    straggler = None
    if timeout_s is None:
        target()
    else:
        th = threading.Thread(target=target, name=f"fn-{uid}", daemon=True)
        th.start()
        th.join(timeout_s)
        if th.is_alive():
            cancel.cancel("timeout")
            straggler = th
    end = clock()
    ts = {"start": start, "end": end}
    if straggler is not None:
        return TaskResult(uid, TaskState.FAILED, error_text="timeout", timestamps=ts,
                          kind=TaskKind.FUNCTION), straggler
    if cancel.is_set() and cancel.reason == "cancel":
        return TaskResult(uid, TaskState.CANCELED, error_text="canceled", timestamps=ts,
                          kind=TaskKind.FUNCTION), None
    if "error" in box:
        return TaskResult(uid, TaskState.FAILED, error_text=_error_text(box["error"]),
                          timestamps=ts, kind=TaskKind.FUNCTION), None
    return TaskResult(uid, TaskState.DONE, value=box.get("value"), timestamps=ts,
                      kind=TaskKind.FUNCTION), None


def execute_function(registry: FunctionRegistry, call: FunctionCall,
                     timeout_s: Optional[float] = None, *, uid: str = "",
                     cancel: Optional[CancelToken] = None,
                     clock: Callable[[], float] = time.time) -> TaskResult:
    return run_function(registry, call, timeout_s, uid=uid, cancel=cancel, clock=clock)[0]


def _kill_group(proc: subprocess.Popen) -> None:
    try:
        os.killpg(proc.pid, signal.SIGKILL)
    except (ProcessLookupError, PermissionError):
        try:
            proc.kill()
        except ProcessLookupError:
            pass


def execute_executable(spec: ExecSpec, timeout_s: Optional[float] = None, *, uid: str = "",
                       cancel: Optional[CancelToken] = None,
                       clock: Callable[[], float] = time.time) -> TaskResult:
    """Run ``spec.argv`` as a child process in its own process group.

    Spawn failures, non-zero exits and timeouts all produce FAILED results;
    nothing here raises for a misbehaving child.
    """
    cancel = cancel or CancelToken()
    env = dict(os.environ)
    env.update(spec.env)
    out = subprocess.PIPE if spec.capture_output else subprocess.DEVNULL
    start = clock()
    try:
        proc = subprocess.Popen(list(spec.argv), env=env, stdin=subprocess.DEVNULL,
                                stdout=out, stderr=out, start_new_session=True)
    except (OSError, ValueError) as e:
        return TaskResult(uid, TaskState.FAILED, error_text=f"SpawnError: {e}",
                          timestamps={"start": start, "end": clock()},
                          kind=TaskKind.EXECUTABLE)
    why: Dict[str, str] = {}

    def kill(reason):
        why.setdefault("reason", reason)
        _kill_group(proc)

    def on_cancel():
        kill(cancel.reason or "cancel")

    cancel.on_cancel(on_cancel)
    timer = None
    if timeout_s is not None:
        timer = threading.Timer(timeout_s, kill, ("timeout",))
        timer.daemon = True
        timer.start()
    try:
        if spec.capture_output:
            stdout, stderr = proc.communicate()
        else:
            stdout = stderr = None
            proc.wait()
    finally:
        if timer is not None:
            timer.cancel()
        cancel.discard(on_cancel)
    end = clock()
    ts = {"start": start, "end": end}
    value = None
    if spec.capture_output:
        value = {"stdout": stdout.decode("utf-8", "replace"),
                 "stderr": stderr.decode("utf-8", "replace")}
    rc = proc.returncode
    reason = why.get("reason")
    if reason == "timeout":
        return TaskResult(uid, TaskState.FAILED, rc, value, "timeout", ts, kind=TaskKind.EXECUTABLE)
    if reason is not None:
        return TaskResult(uid, TaskState.CANCELED, rc, value, "canceled", ts,
                          kind=TaskKind.EXECUTABLE)
    if rc == 0:
        return TaskResult(uid, TaskState.DONE, rc, value, None, ts, kind=TaskKind.EXECUTABLE)
    return TaskResult(uid, TaskState.FAILED, rc, value, f"exit code {rc}", ts,
                      kind=TaskKind.EXECUTABLE)


class Worker:
    """Slot-bounded task runner with batched result reporting.

    ``send(mtype, payload)`` delivers a message to the coordinator; it is
    called from several threads and must be thread safe.
    """

    def __init__(self, worker_id: str, node_id: int, cores: int, gpus: int = 0,
                 registry: FunctionRegistry = REGISTRY,
                 send: Optional[Callable[[MessageType, dict], None]] = None,
                 events: Optional[EventLog] = None, clock: Callable[[], float] = None,
                 flush_n: int = 32, flush_s: float = 1.0, grace_s: float = LOCAL_GRACE_S,
                 pilot_id: str = "", heartbeat_s: float = 10.0):
        self.worker_id = worker_id
        self.node_id = node_id
        self.core_slots = cores
        self.gpu_slots = gpus
        self.registry = registry
        self.send = send or (lambda mtype, payload: None)
        self.events = events
        self.clock = clock or WallClock()
        self.flush_n = flush_n
        self.flush_s = flush_s
        self.grace_s = grace_s
        self.pilot_id = pilot_id
        self.heartbeat_s = heartbeat_s
        self.free_cores = cores
        self.free_gpus = gpus
        self.queue: Deque[TaskDescription] = deque()
        self.running: Dict[str, Tuple[TaskDescription, CancelToken]] = {}
        self.draining = False
        self.closed = False
        self.max_cores_in_use = 0
        self._lock = threading.RLock()
        self._results: List[TaskResult] = []
        self._first_buffered: Optional[float] = None
        self._flush_cond = threading.Condition(self._lock)
        self._idle = threading.Condition(self._lock)
        self._pool = ThreadPoolExecutor(max_workers=max(1, cores), thread_name_prefix=worker_id)
        self._stragglers: List[threading.Thread] = []
        self._flusher = threading.Thread(target=self._flush_loop, name=f"{worker_id}-flush",
                                         daemon=True)
        self._flusher.start()

    def _emit(self, eid, event, attrs=None, kind="task", t=None):
        if self.events is not None:
            self.events.emit(self.clock() if t is None else t, kind, eid, event, attrs)

    # -- inbound ------------------------------------------------------------

    def announce(self) -> None:
        """Initial credit after registration."""
        self._emit(self.worker_id, "worker_start",
                   {"node": self.node_id, "cores": self.core_slots, "gpus": self.gpu_slots,
                    "pilot": self.pilot_id}, kind="worker")
        self.send(MessageType.CREDIT, {"cores": self.core_slots, "gpus": self.gpu_slots})

    def on_bulk(self, tasks: List[TaskDescription]) -> None:
        with self._lock:
            if self.draining:
                for t in tasks:
                    self._buffer(TaskResult(t.uid, TaskState.CANCELED,
                                            error_text="worker draining",
                                            timestamps={"end": self.clock()},
                                            worker_id=self.worker_id, node_id=self.node_id,
                                            kind=t.kind))
                return
            self.queue.extend(tasks)
            self._pump()

    def _pump(self) -> None:
        while self.queue and not self.draining:
            t = self.queue[0]
            if t.cores > self.free_cores or t.gpus > self.free_gpus:
                break
            self.queue.popleft()
            self.free_cores -= t.cores
            self.free_gpus -= t.gpus
            in_use = self.core_slots - self.free_cores
            assert in_use <= self.core_slots and self.free_gpus >= 0, "slot oversubscription"
            self.max_cores_in_use = max(self.max_cores_in_use, in_use)
            token = CancelToken()
            self.running[t.uid] = (t, token)
            self._pool.submit(self._run, t, token)

    def _run(self, t: TaskDescription, token: CancelToken) -> None:
        start = self.clock()
        self._emit(t.uid, "task_start", {"kind": t.kind.value, "cores": t.cores,
                                         "gpus": t.gpus, "pilot": self.pilot_id,
                                         "worker": self.worker_id})
        straggler = None
        try:
            if t.kind is TaskKind.FUNCTION:
                try:
                    r, straggler = run_function(self.registry, t.payload, t.timeout_s,
                                                uid=t.uid, cancel=token, clock=self.clock)
                except UnknownFunction as e:
                    r = TaskResult(t.uid, TaskState.FAILED,
                                   error_text=f"UnknownFunction: {e}",
                                   timestamps={"start": start, "end": self.clock()})
            else:
                r = execute_executable(t.payload, t.timeout_s, uid=t.uid, cancel=token,
                                       clock=self.clock)
        except BaseException as e:  # noqa: BLE001
            r = TaskResult(t.uid, TaskState.FAILED, error_text=_error_text(e),
                           timestamps={"start": start, "end": self.clock()})
        ts = dict(r.timestamps)
        ts.setdefault("start", start)
        r = TaskResult(t.uid, r.state, r.exit_code, r.value, r.error_text, ts,
                       self.worker_id, self.node_id, t.kind)
        self._emit(t.uid, "task_end", {"state": r.state.value}, t=ts["end"])
        with self._lock:
            self._buffer(r)
        if straggler is not None:
            # slots stay reserved until the timed-out call really returns
            self._stragglers.append(straggler)
            threading.Thread(target=self._release_after, args=(t, straggler),
                             daemon=True).start()
        else:
            self._release(t)

    def _release_after(self, t: TaskDescription, th: threading.Thread) -> None:
        th.join()
        self._release(t)

    def _release(self, t: TaskDescription) -> None:
        with self._lock:
            self.running.pop(t.uid, None)
            self.free_cores += t.cores
            self.free_gpus += t.gpus
            self._pump()
            if not self.running:
                self._idle.notify_all()
            closed = self.closed
        if not closed:
            self.send(MessageType.CREDIT, {"cores": t.cores, "gpus": t.gpus})

    # -- results ------------------------------------------------------------

    def _buffer(self, r: TaskResult) -> None:
        self._results.append(r)
        if self._first_buffered is None:
            self._first_buffered = time.monotonic()
        if len(self._results) >= self.flush_n:
            self._flush_locked()
        else:
            self._flush_cond.notify_all()

    def _flush_locked(self) -> None:
        if not self._results or self.closed:
            return
        batch, self._results = self._results, []
        self._first_buffered = None
        self.send(MessageType.RESULT_BULK, {"results": [r.to_dict() for r in batch]})

    def flush(self) -> None:
        with self._lock:
            self._flush_locked()

    def _flush_loop(self) -> None:
        last_hb = time.monotonic()
        with self._lock:
            while not self.closed:
                if self._first_buffered is None:
                    self._flush_cond.wait(self.heartbeat_s)
                else:
                    left = self._first_buffered + self.flush_s - time.monotonic()
                    if left > 0:
                        self._flush_cond.wait(left)
                if self.closed:
                    break
                if self._first_buffered is not None and \
                        time.monotonic() - self._first_buffered >= self.flush_s:
                    self._flush_locked()
                if time.monotonic() - last_hb >= self.heartbeat_s:
                    last_hb = time.monotonic()
                    self.send(MessageType.HEARTBEAT, {"running": len(self.running)})

    # -- control ------------------------------------------------------------

    def drain(self) -> None:
        """Stop taking work: queued tasks are canceled, running ones finish."""
        with self._lock:
            if self.draining:
                return
            self.draining = True
            now = self.clock()
            while self.queue:
                t = self.queue.popleft()
                self._buffer(TaskResult(t.uid, TaskState.CANCELED, error_text="drained",
                                        timestamps={"end": now}, worker_id=self.worker_id,
                                        node_id=self.node_id, kind=t.kind))
        self._emit(self.worker_id, "drain", kind="worker")

    def wait_idle(self, timeout: Optional[float] = None) -> bool:
        with self._lock:
            return self._idle.wait_for(lambda: not self.running, timeout)

    def shutdown(self, cancel_running: bool = True) -> None:
        """Cancel what still runs, flush results, stop threads."""
        self.drain()
        if cancel_running:
            with self._lock:
                tokens = [tok for _, tok in self.running.values()]
            for tok in tokens:
                tok.cancel("cancel")
        self.wait_idle(self.grace_s + 1.0)
        with self._lock:
            self._flush_locked()
            self.closed = True
            self._flush_cond.notify_all()
        self._emit(self.worker_id, "shutdown", kind="worker")
        self._pool.shutdown(wait=False)


def worker_loop(w: Worker, conn: socket.socket) -> str:
    """Serve one coordinator connection until SHUTDOWN or disconnect.

    Returns ``"shutdown"`` or ``"lost"``.
    """
    dec = FrameDecoder()
    while True:
        try:
            data = conn.recv(1 << 16)
        except OSError:
            data = b""
        if not data:
            log.warning("%s: coordinator connection lost; finishing running tasks", w.worker_id)
            w.drain()
            w.wait_idle()
            with w._lock:
                w.closed = True
                w._flush_cond.notify_all()
            return "lost"
        try:
            msgs = dec.feed(data)
        except ProtocolError:
            log.exception("%s: protocol error", w.worker_id)
            w.shutdown()
            return "lost"
        for m in msgs:
            if m.type is MessageType.TASK_BULK:
                w.on_bulk(m.tasks())
            elif m.type is MessageType.DRAIN:
                w.drain()
            elif m.type is MessageType.SHUTDOWN:
                w.shutdown()
                return "shutdown"


class Connection:
    """Thread-safe framed sender over a socket."""

    def __init__(self, sock: socket.socket, sender_id: str):
        self.sock = sock
        self.sender = Sender(sender_id)
        self._lock = threading.Lock()

    def send(self, mtype: MessageType, payload: Optional[dict] = None) -> None:
        with self._lock:
            frame = self.sender.frame(mtype, payload)
            try:
                self.sock.sendall(frame)
            except OSError:
                log.debug("send of %s failed", mtype.value)


def connect(host: str, port: int, retries: int = 50, delay: float = 0.1) -> socket.socket:
    for i in range(retries):
        try:
            s = socket.create_connection((host, port))
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            return s
        except OSError:
            if i == retries - 1:
                raise
            time.sleep(delay)
    raise AssertionError("unreachable")


def register(conn: Connection, worker_id: str, node_id: int, cores: int, gpus: int,
             timeout: float = 30.0) -> None:
    conn.send(MessageType.REGISTER, {"worker_id": worker_id, "node_id": node_id,
                                     "cores": cores, "gpus": gpus})
    dec = FrameDecoder()
    conn.sock.settimeout(timeout)
    try:
        while True:
            data = conn.sock.recv(4096)
            if not data:
                raise ConnectionError("coordinator closed during registration")
            msgs = dec.feed(data)
            if msgs:
                if msgs[0].type is not MessageType.REGISTER_ACK:
                    raise ProtocolError(f"expected REGISTER_ACK, got {msgs[0].type.value}")
                if len(msgs) > 1 or dec.pending:
                    raise ProtocolError("unexpected data after REGISTER_ACK")
                return
    finally:
        conn.sock.settimeout(None)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="pilotfarm-worker")
    ap.add_argument("--connect", required=True, help="coordinator host:port")
    ap.add_argument("--worker-id", required=True)
    ap.add_argument("--node", type=int, default=0)
    ap.add_argument("--cores", type=int, default=1)
    ap.add_argument("--gpus", type=int, default=0)
    ap.add_argument("--pilot", default="")
    ap.add_argument("--log", help="event log file for this worker")
    ap.add_argument("--import", dest="imports", action="append", default=[],
                    help="module registering extra functions")
    ap.add_argument("--flush-n", type=int, default=32)
    ap.add_argument("--flush-s", type=float, default=1.0)
    ap.add_argument("--clock-anchor", help="EPOCH:MONOTONIC shared with the coordinator")
    a = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(asctime)s %(name)s %(message)s")
    for mod in a.imports:
        importlib.import_module(mod)
    host, _, port = a.connect.rpartition(":")
    anchor = tuple(float(x) for x in a.clock_anchor.split(":")) if a.clock_anchor else None
    clock = WallClock(anchor)
    events = EventLog(a.log, clock=clock) if a.log else None
    sock = connect(host, int(port))
    conn = Connection(sock, a.worker_id)
    register(conn, a.worker_id, a.node, a.cores, a.gpus)
    w = Worker(a.worker_id, a.node, a.cores, a.gpus, REGISTRY, conn.send, events, clock,
               a.flush_n, a.flush_s, pilot_id=a.pilot)
    w.announce()
    try:
        worker_loop(w, sock)
    finally:
        if events is not None:
            events.close()
        try:
            sock.close()
        except OSError:
            pass
    return 0


if __name__ == "__main__":
    rc = main()
    logging.shutdown()
    # a timed-out, non-cooperative function thread must not keep us alive
    os._exit(rc)
