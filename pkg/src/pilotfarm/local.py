"""Local-process backend: a coordinator serving real worker processes.

Workers are spawned as ``python -m pilotfarm.worker`` children and connect
back over loopback TCP.  One IO thread per coordinator owns every socket
read; all coordinator state changes happen under ``_mu``.
"""

from __future__ import annotations

import logging
import os
import selectors
import socket
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional

from .coordinator import Coordinator, JoinSummary, WorkerState
from .events import EventLog, WallClock
from .model import CoordinatorConfig, TaskResult, TaskState
from .protocol import FrameDecoder, Message, MessageType, ProtocolError, Sender
from .scheduler import AgentScheduler

log = logging.getLogger(__name__)

_SRC_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


@dataclass
class _Conn:
    sock: socket.socket
    sender: Sender
    decoder: FrameDecoder = field(default_factory=FrameDecoder)
    worker_id: Optional[str] = None
    last_seen: float = 0.0
    lock: threading.Lock = field(default_factory=threading.Lock)

    def send(self, mtype: MessageType, payload: Optional[dict] = None) -> bool:
        with self.lock:
            try:
                self.sock.sendall(self.sender.frame(mtype, payload))
                return True
            except OSError:
                return False


class LocalCoordinator(Coordinator):
    """Coordinator whose workers are child processes on this host."""

    def __init__(self, coordinator_id: str, config: CoordinatorConfig,
                 scheduler: Optional[AgentScheduler], events: EventLog, log_dir: str,
                 clock: Optional[WallClock] = None, pilot_id: str = "", registry=None,
                 worker_imports: Iterable[str] = (), flush_n: int = 32, flush_s: float = 1.0):
        clock = clock or WallClock()
        super().__init__(coordinator_id, config, scheduler, events.emit, clock,
                         registry=registry, pilot_id=pilot_id)
        self.events = events
        self.log_dir = log_dir
        self.worker_imports = list(worker_imports)
        self.flush_n = flush_n
        self.flush_s = flush_s
        self.results: Dict[str, TaskResult] = {}
        self.procs: Dict[str, subprocess.Popen] = {}
        self.worker_logs: List[str] = []
        self._submit_t: Dict[str, float] = {}
        self._dispatch_t: Dict[str, float] = {}
        self._mu = threading.RLock()
        self._cv = threading.Condition(self._mu)
        self._conns: Dict[str, _Conn] = {}
        self._sel = selectors.DefaultSelector()
        self._server: Optional[socket.socket] = None
        self._wake_r, self._wake_w = socket.socketpair()
        self._io: Optional[threading.Thread] = None
        self._closed = False
        self._stop_done = False
        self.address = None

    # -- lifecycle ----------------------------------------------------------

    def start(self):
        placed = super().start()
        srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        srv.bind(("127.0.0.1", 0))
        srv.listen(max(16, len(placed)))
        self._server = srv
        self.address = srv.getsockname()
        self._sel.register(srv, selectors.EVENT_READ, "accept")
        self._sel.register(self._wake_r, selectors.EVENT_READ, "wake")
        self._io = threading.Thread(target=self._io_loop, name=f"{self.coordinator_id}-io",
                                    daemon=True)
        self._io.start()
        self.emit("coordinator", self.coordinator_id, "coord_ready")
        os.makedirs(self.log_dir, exist_ok=True)
        for wid, p in placed:
            self._spawn(wid, p.node_id if p is not None else 0)
        return placed

    def _spawn(self, wid: str, node: int) -> None:
        path = os.path.join(self.log_dir, f"{wid}.events")
        self.worker_logs.append(path)
        epoch0, mono0 = self.clock.anchor
        argv = [sys.executable, "-m", "pilotfarm.worker",
                "--connect", f"{self.address[0]}:{self.address[1]}",
                "--worker-id", wid, "--node", str(node), "--cores", str(self.config.cpn),
                "--gpus", str(self.config.gpn), "--pilot", self.pilot_id, "--log", path,
                "--flush-n", str(self.flush_n), "--flush-s", repr(self.flush_s),
                "--clock-anchor", f"{epoch0!r}:{mono0!r}"]
        for mod in self.worker_imports:
            argv += ["--import", mod]
        env = dict(os.environ)
        env["PYTHONPATH"] = os.pathsep.join(filter(None, [_SRC_DIR, env.get("PYTHONPATH")]))
        self.procs[wid] = subprocess.Popen(argv, env=env, stdin=subprocess.DEVNULL)

    def submit(self, tasks, validate: bool = True) -> int:
        tasks = list(tasks)
        with self._mu:
            t = self.clock()
            n = super().submit(tasks, validate)
            for task in tasks:
                self._submit_t.setdefault(task.uid, t)
            self._pump()
            self._cv.notify_all()
            return n

    def wait_registered(self, timeout: float = 30.0) -> bool:
        with self._mu:
            return self._cv.wait_for(
                lambda: all(w.state is not WorkerState.LAUNCHING
                            for w in self.worker_table.values()), timeout)

    def join(self, timeout: Optional[float] = None) -> JoinSummary:
        """Wait until nothing is pending or outstanding, or ``timeout`` passes."""
        with self._mu:
            finished = self._cv.wait_for(lambda: self.idle, timeout)
            return self.summary(walltime_hit=not finished)

    def stop(self, grace_s: float = 5.0) -> JoinSummary:
        """DRAIN then SHUTDOWN every worker; cancel what never reports.

        Idempotent: later calls return the same summary without side effects.
        """
        with self._mu:
            if not self.begin_stop():
                while not self._stop_done:
                    self._cv.wait(0.1)
                return self.summary()
            conns = list(self._conns.values())
        for c in conns:
            c.send(MessageType.DRAIN)
        for c in conns:
            c.send(MessageType.SHUTDOWN)
        with self._mu:
            self._cv.wait_for(lambda: self.n_outstanding == 0, grace_s)
        deadline = time.monotonic() + grace_s
        for wid, p in self.procs.items():
            try:
                p.wait(max(0.0, deadline - time.monotonic()))
            except subprocess.TimeoutExpired:
                log.warning("%s did not exit; killing", wid)
                p.kill()
                p.wait()
        self._close_io()
        with self._mu:
            self.finish_stop()
            self._stop_done = True
            self._cv.notify_all()
        return self.summary()

    def _close_io(self) -> None:
        self._closed = True
        try:
            self._wake_w.send(b"x")
        except OSError:
            pass
        if self._io is not None:
            self._io.join(5.0)
        for c in list(self._conns.values()):
            try:
                c.sock.close()
            except OSError:
                pass
        if self._server is not None:
            self._server.close()
        self._sel.close()
        self._wake_r.close()
        self._wake_w.close()

    def kill_worker(self, worker_id: str) -> None:
        """Fault injection: SIGKILL one worker process."""
        self.procs[worker_id].kill()

    # -- IO thread ----------------------------------------------------------

    def _io_loop(self) -> None:
        while not self._closed:
            try:
                ready = self._sel.select(timeout=0.2)
            except (OSError, ValueError):
                break
            for key, _ in ready:
                if key.data == "accept":
                    self._accept()
                elif key.data == "wake":
                    try:
                        self._wake_r.recv(64)
                    except OSError:
                        pass
                else:
                    self._read(key.data)
            self._check_procs()

    def _accept(self) -> None:
        try:
            sock, _ = self._server.accept()
        except OSError:
            return
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        conn = _Conn(sock, Sender(self.coordinator_id, self.config.bulk_size),
                     last_seen=time.monotonic())
        self._sel.register(sock, selectors.EVENT_READ, conn)

    def _read(self, conn: _Conn) -> None:
        try:
            data = conn.sock.recv(1 << 16)
        except OSError:
            data = b""
        if not data:
            self._disconnect(conn)
            return
        conn.last_seen = time.monotonic()
        try:
            msgs = conn.decoder.feed(data)
        except ProtocolError:
            log.exception("%s: bad frame from %s", self.coordinator_id, conn.worker_id)
            self._disconnect(conn)
            return
        with self._mu:
            for m in msgs:
                self._handle(conn, m)
            self._cv.notify_all()

    def _handle(self, conn: _Conn, m: Message) -> None:
        if m.type is MessageType.REGISTER:
            p = m.payload
            wid = p["worker_id"]
            conn.worker_id = wid
            self._conns[wid] = conn
            self.register(wid, p.get("node_id"), p.get("cores"), p.get("gpus"))
            if self.stopped:
                self.worker_table[wid].state = WorkerState.DRAINING
            conn.send(MessageType.REGISTER_ACK, {"worker_id": wid})
        elif m.type is MessageType.CREDIT:
            self.grant(conn.worker_id, m.payload["cores"], m.payload.get("gpus", 0))
            self._pump()
        elif m.type is MessageType.RESULT_BULK:
            for r in m.results():
                self._record(conn.worker_id, r)
        elif m.type is MessageType.HEARTBEAT:
            pass
        else:
            log.warning("%s: unexpected %s from %s", self.coordinator_id, m.type.value,
                        conn.worker_id)

    def _record(self, wid: str, r: TaskResult) -> None:
        if not self.complete(wid, r.uid, r.state):
            return
        ts = dict(r.timestamps)
        if r.uid in self._submit_t:
            ts["submit"] = self._submit_t.pop(r.uid)
        if r.uid in self._dispatch_t:
            ts["schedule"] = ts["dispatch"] = self._dispatch_t.pop(r.uid)
        self.results[r.uid] = TaskResult(r.uid, r.state, r.exit_code, r.value, r.error_text,
                                         ts, r.worker_id or wid, r.node_id, r.kind)

    def _pump(self) -> None:
        for wid, bulk in self.assign():
            t = self.clock()
            for task in bulk:
                self._dispatch_t[task.uid] = t
            conn = self._conns.get(wid)
            if conn is None or not conn.send(MessageType.TASK_BULK,
                                             {"tasks": [x.to_dict() for x in bulk]}):
                self._lose(wid)

    def _disconnect(self, conn: _Conn) -> None:
        try:
            self._sel.unregister(conn.sock)
        except (KeyError, ValueError, OSError):
            pass
        try:
            conn.sock.close()
        except OSError:
            pass
        wid = conn.worker_id
        if wid is None:
            return
        with self._mu:
            self._conns.pop(wid, None)
            w = self.worker_table.get(wid)
            if self.stopped:
                # anything it still held is canceled by finish_stop
                if w is not None and w.state is not WorkerState.LOST:
                    w.state = WorkerState.DONE
            else:
                self._lose(wid)
            self._cv.notify_all()

    def _lose(self, wid: str) -> None:
        lost = self.worker_lost(wid)
        for task in lost:
            self._submit_t.pop(task.uid, None)
            self._dispatch_t.pop(task.uid, None)
        if lost:
            log.warning("%s: worker %s lost with %d tasks outstanding",
                        self.coordinator_id, wid, len(lost))
        self._cancel_if_orphaned()

    def _cancel_if_orphaned(self) -> None:
        alive = [w for w in self.worker_table.values()
                 if w.state in (WorkerState.LAUNCHING, WorkerState.ACTIVE)]
        if not alive and self.pending:
            log.warning("%s: no workers left; canceling %d pending tasks",
                        self.coordinator_id, len(self.pending))
            while self.pending:
                self._finish(self.pending.popleft().uid, TaskState.CANCELED, "no workers")

    def _check_procs(self) -> None:
        with self._mu:
            for wid, p in self.procs.items():
                w = self.worker_table.get(wid)
                if w is None or p.poll() is None:
                    continue
                if w.state is WorkerState.LAUNCHING:
                    log.warning("%s: worker %s exited with %s before registering",
                                self.coordinator_id, wid, p.returncode)
                    self._lose(wid)
                    self._cv.notify_all()
