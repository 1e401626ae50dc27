import math
import socket
import sys
import threading
import time

import pytest

from pilotfarm.events import EventLog
from pilotfarm.model import ExecSpec, FunctionCall, TaskDescription, TaskState
from pilotfarm.protocol import FrameDecoder, MessageType, Sender, task_bulk, encode
from pilotfarm.worker import (REGISTRY, CancelToken, FunctionRegistry, UnknownFunction, Worker,
                              execute_executable, execute_function, run_function, worker_loop)
from pilotfarm.workload import SLEEPER


class Inbox:
    """Collects what a worker sends to its coordinator."""

    def __init__(self):
        self.msgs = []
        self.lock = threading.Lock()

    def __call__(self, mtype, payload):
        with self.lock:
            self.msgs.append((mtype, payload))

    def results(self):
        with self.lock:
            return [r for m, p in self.msgs if m is MessageType.RESULT_BULK for r in p["results"]]

    def credits(self):
        with self.lock:
            return sum(p["cores"] for m, p in self.msgs if m is MessageType.CREDIT)


def wait_for(pred, timeout=30.0):
    t_end = time.monotonic() + timeout
    while time.monotonic() < t_end:
        if pred():
            return True
        time.sleep(0.01)
    return False


def test_sleep_then_ok():
    r = execute_function(REGISTRY, FunctionCall("sleep_then_ok", {"t": 0.01}))
    assert r.state is TaskState.DONE and r.value == "ok"
    assert 0.01 <= r.duration < 0.5


def test_docking_surrogate_cut_at_timeout():
    r, straggler = run_function(REGISTRY, FunctionCall("synthetic_dock", {"duration": 5.0}),
                                timeout_s=0.2)
    assert r.state is TaskState.FAILED and r.error_text == "timeout"
    assert r.duration == pytest.approx(0.2, abs=0.1)
    # the cooperative function saw the cancel and stops promptly
    straggler.join(2.0)
    assert not straggler.is_alive()


def test_unknown_function():
    with pytest.raises(UnknownFunction):
        execute_function(REGISTRY, FunctionCall("nope"))


def test_function_exception_is_failed():
    r = execute_function(REGISTRY, FunctionCall("fail", {"message": "bad input"}))
    assert r.state is TaskState.FAILED and "bad input" in r.error_text


def test_cancel_token_cancels_function():
    tok = CancelToken()
    threading.Timer(0.05, tok.cancel).start()
    r = execute_function(REGISTRY, FunctionCall("sleep", {"seconds": 10}), cancel=tok)
    assert r.state is TaskState.CANCELED and r.duration < 2


def test_private_registry():
    reg = FunctionRegistry()

    @reg.register(name="add")
    def _add(a, b):
        return a + b

    assert execute_function(reg, FunctionCall("add", [2, 3])).value == 5
    assert reg.names() == ["add"] and "add" in reg


@pytest.mark.parametrize("argv,state,code", [
    (["/bin/sh", "-c", "exit 0"], TaskState.DONE, 0),
    (["/bin/sh", "-c", "exit 3"], TaskState.FAILED, 3),
])
def test_exit_codes(argv, state, code):
    r = execute_executable(ExecSpec(argv))
    assert r.state is state and r.exit_code == code


def test_spawn_error():
    r = execute_executable(ExecSpec(["/nonexistent"]))
    assert r.state is TaskState.FAILED and r.error_text.startswith("SpawnError")


def test_timeout_kills_process_group():
    t0 = time.monotonic()
    r = execute_executable(ExecSpec(["/bin/sh", "-c", "sleep 30 & sleep 30"]), timeout_s=0.3)
    assert r.state is TaskState.FAILED and r.error_text == "timeout"
    assert time.monotonic() - t0 < 5


def test_capture_output_and_env():
    r = execute_executable(ExecSpec(["/bin/sh", "-c", "echo $FOO; echo err >&2"],
                                    {"FOO": "bar"}, capture_output=True))
    assert r.value == {"stdout": "bar\n", "stderr": "err\n"}


def test_sleeper_utility():
    r = execute_executable(ExecSpec([sys.executable, "-S", "-E", SLEEPER, "0.05"]))
    assert r.state is TaskState.DONE
    r = execute_executable(ExecSpec([sys.executable, "-S", "-E", SLEEPER]))
    assert r.exit_code == 2


def fn(uid, seconds):
    return TaskDescription.function(uid, "sleep", {"seconds": seconds})


def test_four_slots_128_one_second_tasks():
    box = Inbox()
    w = Worker("w", 0, 4, send=box, flush_n=32, flush_s=0.5)
    t0 = time.monotonic()
    w.on_bulk([fn(f"t{i}", 1.0) for i in range(128)])
    assert wait_for(lambda: len(box.results()) == 128, 120)
    elapsed = time.monotonic() - t0
    assert elapsed == pytest.approx(math.ceil(128 / 4) * 1.0, rel=0.15)
    assert w.max_cores_in_use == 4
    assert all(r["state"] == "DONE" for r in box.results())
    # one credit per released slot
    assert box.credits() == 128
    w.shutdown()


def test_drain_with_running_and_queued():
    box = Inbox()
    w = Worker("w", 0, 2, send=box, flush_n=1)
    w.on_bulk([fn(f"t{i}", 0.3) for i in range(7)])
    assert wait_for(lambda: len(w.running) == 2)
    w.drain()
    assert w.wait_idle(10)
    w.flush()
    states = [r["state"] for r in box.results()]
    assert states.count("DONE") == 2 and states.count("CANCELED") == 5


def test_bulk_while_draining_is_canceled():
    box = Inbox()
    w = Worker("w", 0, 1, send=box, flush_n=1)
    w.drain()
    w.on_bulk([fn("a", 0.0)])
    assert [r["state"] for r in box.results()] == ["CANCELED"]


def test_multi_core_task_waits_for_slots():
    box = Inbox()
    w = Worker("w", 0, 2, send=box, flush_n=1)
    big = TaskDescription.function("big", "sleep", {"seconds": 0.05}, cores=2)
    w.on_bulk([fn("a", 0.2), big])
    assert wait_for(lambda: len(box.results()) == 2)
    assert w.max_cores_in_use == 2
    r = {x["uid"]: x for x in box.results()}
    assert r["big"]["timestamps"]["start"] >= r["a"]["timestamps"]["end"] - 1e-6


def test_events_logged(tmp_path):
    log = EventLog(tmp_path / "w.events", keep=True)
    w = Worker("w", 3, 1, send=Inbox(), events=log, pilot_id="p0")
    w.announce()
    w.on_bulk([TaskDescription.executable("x", ["/bin/true"])])
    assert wait_for(lambda: not w.running and not w.queue)
    w.shutdown()
    ev = [(r.entity_id, r.event) for r in log.records]
    assert ("w", "worker_start") in ev and ("x", "task_start") in ev and ("x", "task_end") in ev
    start = next(r for r in log.records if r.event == "task_start")
    assert start.attrs["kind"] == "EXECUTABLE" and start.attrs["pilot"] == "p0"


def test_worker_loop_over_socket():
    a, b = socket.socketpair()
    box = Inbox()
    w = Worker("w", 0, 2, send=box, flush_n=1)
    out = {}
    th = threading.Thread(target=lambda: out.setdefault("r", worker_loop(w, b)))
    th.start()
    s = Sender("c0")
    a.sendall(encode(task_bulk("c0", 1, [fn("a", 0.0), fn("b", 0.0)])))
    assert wait_for(lambda: len(box.results()) == 2)
    a.sendall(s.frame(MessageType.DRAIN) + s.frame(MessageType.SHUTDOWN))
    th.join(10)
    assert out["r"] == "shutdown"
    a.close()


def test_worker_loop_detects_lost_coordinator():
    a, b = socket.socketpair()
    w = Worker("w", 0, 1, send=Inbox())
    out = {}
    th = threading.Thread(target=lambda: out.setdefault("r", worker_loop(w, b)))
    th.start()
    a.close()
    th.join(10)
    assert out["r"] == "lost"
