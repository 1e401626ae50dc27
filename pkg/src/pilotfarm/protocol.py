"""Length-prefixed message framing between coordinator, workers and agent.

A frame is a 4-byte unsigned big-endian length followed by exactly that many
bytes of UTF-8 JSON holding one message object on a single line::

    00 00 00 3a  {"payload":{},"sender_id":"w1","seq":1,"type":"HEARTBEAT"}

Bodies are written with sorted keys and no whitespace so that a message has
one canonical encoding.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, List, Optional, Tuple

from .model import TaskDescription, TaskResult, is_value_tree

HEADER = struct.Struct("!I")
MAX_FRAME = 64 * 1024 * 1024


class EncodeError(ValueError):
    pass


class ProtocolError(ValueError):
    pass


class NeedMoreBytes(Exception):
    """The buffer does not yet hold a complete frame."""


class MessageType(str, Enum):
    REGISTER = "REGISTER"
    REGISTER_ACK = "REGISTER_ACK"
    TASK_BULK = "TASK_BULK"
    RESULT_BULK = "RESULT_BULK"
    HEARTBEAT = "HEARTBEAT"
    CREDIT = "CREDIT"
    DRAIN = "DRAIN"
    SHUTDOWN = "SHUTDOWN"


@dataclass(frozen=True)
class Message:
    type: MessageType
    sender_id: str
    seq: int
    payload: dict = field(default_factory=dict)

    def tasks(self) -> List[TaskDescription]:
        return [TaskDescription.from_dict(d) for d in self.payload["tasks"]]

    def results(self) -> List[TaskResult]:
        return [TaskResult.from_dict(d) for d in self.payload["results"]]


def _check_payload(mtype: MessageType, payload: Any, max_bulk: Optional[int], exc):
    if not isinstance(payload, dict):
        raise exc(f"{mtype.value} payload must be an object")
    if mtype is MessageType.TASK_BULK:
        tasks = payload.get("tasks")
        if not isinstance(tasks, list) or not tasks:
            raise exc("TASK_BULK must carry at least one task")
        if max_bulk is not None and len(tasks) > max_bulk:
            raise exc(f"TASK_BULK of {len(tasks)} exceeds bulk size {max_bulk}")
    elif mtype is MessageType.RESULT_BULK:
        results = payload.get("results")
        if not isinstance(results, list) or not results:
            raise exc("RESULT_BULK must carry at least one result")
    elif mtype is MessageType.CREDIT:
        for k in ("cores", "gpus"):
            v = payload.get(k)
            if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                raise exc(f"CREDIT.{k} must be a non-negative integer")


def encode(m: Message, max_bulk: Optional[int] = None) -> bytes:
    """Serialize ``m`` into one frame."""
    try:
        mtype = MessageType(m.type)
    except ValueError:
        raise EncodeError(f"unknown message type {m.type!r}") from None
    if not isinstance(m.sender_id, str):
        raise EncodeError("sender_id must be a string")
    if not isinstance(m.seq, int) or isinstance(m.seq, bool) or m.seq < 0:
        raise EncodeError("seq must be a non-negative integer")
    _check_payload(mtype, m.payload, max_bulk, EncodeError)
    if not is_value_tree(m.payload):
        raise EncodeError("payload is not a finite serializable value tree")
    obj = {"type": mtype.value, "sender_id": m.sender_id, "seq": m.seq,
           "payload": m.payload}
    try:
        body = json.dumps(obj, sort_keys=True, separators=(",", ":"),
                          ensure_ascii=False, allow_nan=False).encode("utf-8")
    except (TypeError, ValueError, UnicodeEncodeError) as e:
        raise EncodeError(str(e)) from None
    if len(body) > MAX_FRAME:
        raise EncodeError(f"body of {len(body)} bytes exceeds {MAX_FRAME}")
    return HEADER.pack(len(body)) + body


def _parse_body(body: bytes) -> Message:
    try:
        text = body.decode("utf-8")
    except UnicodeDecodeError as e:
        raise ProtocolError(f"body is not UTF-8: {e}") from None
    if "\n" in text or "\r" in text:
        raise ProtocolError("body must be a single line")
    try:
        obj = json.loads(text)
    except ValueError as e:
        raise ProtocolError(f"malformed body: {e}") from None
    if not isinstance(obj, dict) or set(obj) != {"type", "sender_id", "seq", "payload"}:
        raise ProtocolError("body must be an object with type, sender_id, seq, payload")
    try:
        mtype = MessageType(obj["type"])
    except ValueError:
        raise ProtocolError(f"unknown message type {obj['type']!r}") from None
    seq = obj["seq"]
    if not isinstance(seq, int) or isinstance(seq, bool) or seq < 0:
        raise ProtocolError("seq must be a non-negative integer")
    if not isinstance(obj["sender_id"], str):
        raise ProtocolError("sender_id must be a string")
    _check_payload(mtype, obj["payload"], None, ProtocolError)
    return Message(mtype, obj["sender_id"], seq, obj["payload"])


def decode(buf: bytes) -> Tuple[Message, bytes]:
    """Consume exactly one frame from ``buf``.

    Returns the message and the unconsumed remainder.  Raises
    :class:`NeedMoreBytes` (consuming nothing) on a partial frame and
    :class:`ProtocolError` on a malformed one.
    """
    if len(buf) < HEADER.size:
        raise NeedMoreBytes()
    (n,) = HEADER.unpack_from(buf)
    if n > MAX_FRAME:
        raise ProtocolError(f"frame length {n} exceeds {MAX_FRAME}")
    end = HEADER.size + n
    if len(buf) < end:
        raise NeedMoreBytes()
    return _parse_body(bytes(buf[HEADER.size:end])), bytes(buf[end:])


class FrameDecoder:
    """Incremental decoder for one byte stream (one per connection)."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> List[Message]:
        self._buf += data
        out = []
        pos = 0
        buf = self._buf
        while len(buf) - pos >= HEADER.size:
            (n,) = HEADER.unpack_from(buf, pos)
            if n > MAX_FRAME:
                raise ProtocolError(f"frame length {n} exceeds {MAX_FRAME}")
            end = pos + HEADER.size + n
            if len(buf) < end:
                break
            out.append(_parse_body(bytes(buf[pos + HEADER.size:end])))
            pos = end
        if pos:
            del buf[:pos]
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)


def decode_all(chunks: Iterable[bytes]) -> List[Message]:
    dec = FrameDecoder()
    out = []
    for c in chunks:
        out.extend(dec.feed(c))
    if dec.pending:
        raise NeedMoreBytes()
    return out


class SeqTracker:
    """Receiver-side check that each sender's seq advances by exactly one."""

    def __init__(self):
        self.last = {}
        self.gaps = []

    def check(self, m: Message) -> bool:
        prev = self.last.get(m.sender_id)
        self.last[m.sender_id] = m.seq
        if prev is not None and m.seq != prev + 1:
            self.gaps.append((m.sender_id, prev, m.seq))
            return False
        return True


class Sender:
    """Stamps outgoing messages with a per-connection monotone seq."""

    def __init__(self, sender_id: str, max_bulk: Optional[int] = None):
        self.sender_id = sender_id
        self.max_bulk = max_bulk
        self.seq = 0

    def frame(self, mtype: MessageType, payload: Optional[dict] = None) -> bytes:
        self.seq += 1
        return encode(Message(mtype, self.sender_id, self.seq, payload or {}),
                      self.max_bulk)


def task_bulk(sender_id: str, seq: int, tasks: Iterable[TaskDescription]) -> Message:
    return Message(MessageType.TASK_BULK, sender_id, seq,
                   {"tasks": [t.to_dict() for t in tasks]})


def result_bulk(sender_id: str, seq: int, results: Iterable[TaskResult]) -> Message:
    return Message(MessageType.RESULT_BULK, sender_id, seq,
                   {"results": [r.to_dict() for r in results]})
