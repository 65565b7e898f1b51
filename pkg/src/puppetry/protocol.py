"""Servant/puppeteer wire protocol.

A frame is a 4-byte big-endian payload length followed by the payload, a
canonical JSON rendering of one message (sorted keys, no whitespace, ASCII
only). The same frames travel over TCP and over the simulator's in-process
channel.
"""

from __future__ import annotations

import json
import math
import socket
import struct
from dataclasses import dataclass, field
from typing import Any, Iterator, Mapping, Union
from urllib.parse import urlsplit

from .calibration import BatteryStatus
from .safety import SafetyRefusal
from .workloads import Flood, HashCrack, KeyRange, Opaque, PoW, TaskSpec

MAX_FRAME = 16 * 1024 * 1024
HEADER = struct.Struct(">I")
DEFAULT_HEARTBEAT_MS = 30_000


class CodecError(Exception):
    pass


class NeedMoreBytes(CodecError):
    def __init__(self, needed: int):
        super().__init__(f"need {needed} more bytes")
        self.needed = needed


class MalformedFrame(CodecError):
    def __init__(self, offset: int, detail: str = ""):
        super().__init__(f"malformed frame at offset {offset}" + (f": {detail}" if detail else ""))
        self.offset = offset
        self.detail = detail


class OversizeFrame(CodecError):
    def __init__(self, length: int):
        super().__init__(f"frame payload of {length} bytes exceeds {MAX_FRAME}")
        self.length = length


class UnknownTag(CodecError):
    def __init__(self, tag: object):
        super().__init__(f"unknown message tag {tag!r}")
        self.tag = tag


# -- messages ------------------------------------------------------------------


@dataclass(frozen=True)
class Register:
    servant_id: str
    origin: str
    scope: str
    browser_name: str
    device_summary: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class RegisterAck:
    assigned_id: str
    heartbeat_interval_ms: int = DEFAULT_HEARTBEAT_MS


@dataclass(frozen=True)
class Heartbeat:
    servant_id: str
    seq: int
    utilization: float
    battery: BatteryStatus
    timestamp_ms: int

    def __post_init__(self):
        if not (0.0 <= self.utilization <= 1.0):
            raise ValueError("utilization must be in [0, 1]")
        if self.seq < 0:
            raise ValueError("seq must be non-negative")


@dataclass(frozen=True)
class TaskAssign:
    task: TaskSpec


@dataclass(frozen=True)
class ResultPayload:
    """Outcome of (part of) a task.

    ``status`` is one of ``found``, ``exhausted``, ``stats`` or ``unsupported``.
    """

    status: str
    finding: str | None = None
    work_done: int = 0
    detail: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.status not in RESULT_STATUSES:
            raise ValueError(f"unknown result status {self.status!r}")


RESULT_STATUSES = frozenset({"found", "exhausted", "stats", "unsupported"})


@dataclass(frozen=True)
class TaskResult:
    task_id: str
    payload: ResultPayload


@dataclass(frozen=True)
class Throttle:
    intensity: float
    pause: bool = False

    def __post_init__(self):
        if not (0.0 <= self.intensity <= 1.0):
            raise ValueError("intensity must be in [0, 1]")


@dataclass(frozen=True)
class PushWake:
    servant_id: str


@dataclass(frozen=True)
class ProtocolError:
    code: str
    detail: str = ""


Message = Union[Register, RegisterAck, Heartbeat, TaskAssign, TaskResult, Throttle, PushWake, ProtocolError]
MESSAGE_TYPES = {cls.__name__: cls for cls in
                 (Register, RegisterAck, Heartbeat, TaskAssign, TaskResult, Throttle, PushWake, ProtocolError)}


# -- to/from plain data --------------------------------------------------------


def _range_to_wire(r: KeyRange) -> list[int]:
    return [r.start_index, r.end_index]


def task_to_wire(task: TaskSpec) -> dict[str, Any]:
    kind = task.kind
    if isinstance(kind, HashCrack):
        k = {"type": "HashCrack", "algorithm": kind.algorithm, "target_digest": kind.target_digest.hex(),
             "alphabet": kind.alphabet, "length": kind.length, "range": _range_to_wire(kind.range)}
    elif isinstance(kind, PoW):
        k = {"type": "PoW", "header": kind.header.hex(), "target": format(kind.target, "x"),
             "nonce_range": _range_to_wire(kind.nonce_range)}
    elif isinstance(kind, Flood):
        k = {"type": "Flood", "target": kind.target, "path": kind.path, "method": kind.method,
             "duration_ms": kind.duration_ms, "max_concurrency": kind.max_concurrency,
             "rate_cap": kind.rate_cap, "hold_open": kind.hold_open,
             "trickle_interval_ms": kind.trickle_interval_ms}
    elif isinstance(kind, Opaque):
        k = {"type": "Opaque", "label": kind.label}
    else:
        raise TypeError(f"unknown task kind {type(kind).__name__}")
    return {"task_id": task.task_id, "intensity_cap": task.intensity_cap, "kind": k}


def to_wire(m: Message) -> dict[str, Any]:
    name = type(m).__name__
    if isinstance(m, Register):
        body = {"servant_id": m.servant_id, "origin": m.origin, "scope": m.scope,
                "browser_name": m.browser_name, "device_summary": dict(m.device_summary)}
    elif isinstance(m, RegisterAck):
        body = {"assigned_id": m.assigned_id, "heartbeat_interval_ms": m.heartbeat_interval_ms}
    elif isinstance(m, Heartbeat):
        body = {"servant_id": m.servant_id, "seq": m.seq, "utilization": m.utilization,
                "battery": m.battery.to_dict(), "timestamp_ms": m.timestamp_ms}
    elif isinstance(m, TaskAssign):
        body = {"task": task_to_wire(m.task)}
    elif isinstance(m, TaskResult):
        p = m.payload
        body = {"task_id": m.task_id, "payload": {"status": p.status, "finding": p.finding,
                                                    "work_done": p.work_done, "detail": dict(p.detail)}}
    elif isinstance(m, Throttle):
        body = {"intensity": m.intensity, "pause": m.pause}
    elif isinstance(m, PushWake):
        body = {"servant_id": m.servant_id}
    elif isinstance(m, ProtocolError):
        body = {"code": m.code, "detail": m.detail}
    else:
        raise TypeError(f"not a protocol message: {m!r}")
    return {"type": name, **body}


class _Invalid(Exception):
    pass


def _obj(raw: Any, keys: set[str], optional: frozenset[str] = frozenset()) -> dict[str, Any]:
    if not isinstance(raw, dict):
        raise _Invalid("expected an object")
    present = set(raw)
    if not (keys - optional) <= present or not present <= keys:
        raise _Invalid(f"expected keys {sorted(keys)}, got {sorted(present)}")
    return raw


def _str(v: Any) -> str:
    if not isinstance(v, str):
        raise _Invalid("expected a string")
    return v


def _int(v: Any) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise _Invalid("expected an integer")
    return v


def _float(v: Any) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise _Invalid("expected a finite number")
    return float(v)


def _bool(v: Any) -> bool:
    if not isinstance(v, bool):
        raise _Invalid("expected a boolean")
    return v


def _scalar_map(v: Any) -> dict[str, Any]:
    if not isinstance(v, dict):
        raise _Invalid("expected an object")
    for value in v.values():
        if value is not None and not isinstance(value, (str, int, float, bool)):
            raise _Invalid("map values must be scalars")
        if isinstance(value, float) and not math.isfinite(value):
            raise _Invalid("map values must be finite")
    return v


def _hex(v: Any) -> bytes:
    s = _str(v)
    if s != s.lower():
        raise _Invalid("hex must be lowercase")
    try:
        return bytes.fromhex(s)
    except ValueError:
        raise _Invalid("bad hex") from None


def _range(v: Any) -> KeyRange:
    if not isinstance(v, list) or len(v) != 2:
        raise _Invalid("expected [start, end]")
    return KeyRange(_int(v[0]), _int(v[1]))


def task_from_wire(raw: Any) -> TaskSpec:
    d = _obj(raw, {"task_id", "intensity_cap", "kind"})
    k = d["kind"]
    if not isinstance(k, dict):
        raise _Invalid("kind must be an object")
    tag = k.get("type")
    if tag == "HashCrack":
        k = _obj(k, {"type", "algorithm", "target_digest", "alphabet", "length", "range"})
        kind = HashCrack(_str(k["algorithm"]), _hex(k["target_digest"]), _str(k["alphabet"]),
                         _int(k["length"]), _range(k["range"]))
    elif tag == "PoW":
        k = _obj(k, {"type", "header", "target", "nonce_range"})
        target_s = _str(k["target"])
        if not target_s or any(c not in "0123456789abcdef" for c in target_s) or len(target_s) > 65:
            raise _Invalid("bad PoW target")
        kind = PoW(_hex(k["header"]), int(target_s, 16), _range(k["nonce_range"]))
    elif tag == "Flood":
        k = _obj(k, {"type", "target", "path", "method", "duration_ms", "max_concurrency",
                     "rate_cap", "hold_open", "trickle_interval_ms"})
        rate = k["rate_cap"]
        kind = Flood(_str(k["target"]), _str(k["path"]), _str(k["method"]), _int(k["duration_ms"]),
                     _int(k["max_concurrency"]), None if rate is None else _float(rate),
                     _bool(k["hold_open"]), _int(k["trickle_interval_ms"]))
    elif tag == "Opaque":
        k = _obj(k, {"type", "label"})
        kind = Opaque(_str(k["label"]))
    else:
        raise _Invalid(f"unknown task kind {tag!r}")
    return TaskSpec(_str(d["task_id"]), kind, _float(d["intensity_cap"]))


def from_wire(raw: Any) -> Message:
    if not isinstance(raw, dict):
        raise _Invalid("message must be an object")
    tag = raw.get("type")
    if not isinstance(tag, str) or tag not in MESSAGE_TYPES:
        raise UnknownTag(tag)
    body = {k: v for k, v in raw.items() if k != "type"}
    if tag == "Register":
        d = _obj(body, {"servant_id", "origin", "scope", "browser_name", "device_summary"})
        return Register(_str(d["servant_id"]), _str(d["origin"]), _str(d["scope"]),
                        _str(d["browser_name"]), _scalar_map(d["device_summary"]))
    if tag == "RegisterAck":
        d = _obj(body, {"assigned_id", "heartbeat_interval_ms"})
        return RegisterAck(_str(d["assigned_id"]), _int(d["heartbeat_interval_ms"]))
    if tag == "Heartbeat":
        d = _obj(body, {"servant_id", "seq", "utilization", "battery", "timestamp_ms"})
        b = _obj(d["battery"], {"charging", "level"})
        return Heartbeat(_str(d["servant_id"]), _int(d["seq"]), _float(d["utilization"]),
                         BatteryStatus(_bool(b["charging"]), _float(b["level"])), _int(d["timestamp_ms"]))
    if tag == "TaskAssign":
        d = _obj(body, {"task"})
        return TaskAssign(task_from_wire(d["task"]))
    if tag == "TaskResult":
        d = _obj(body, {"task_id", "payload"})
        p = _obj(d["payload"], {"status", "finding", "work_done", "detail"})
        finding = p["finding"]
        return TaskResult(_str(d["task_id"]), ResultPayload(
            _str(p["status"]), None if finding is None else _str(finding),
            _int(p["work_done"]), _scalar_map(p["detail"])))
    if tag == "Throttle":
        d = _obj(body, {"intensity", "pause"})
        return Throttle(_float(d["intensity"]), _bool(d["pause"]))
    if tag == "PushWake":
        d = _obj(body, {"servant_id"})
        return PushWake(_str(d["servant_id"]))
    d = _obj(body, {"code", "detail"})
    return ProtocolError(_str(d["code"]), _str(d["detail"]))


# -- framing -------------------------------------------------------------------


def serialize(m: Message) -> bytes:
    """Canonical payload bytes for ``m`` (the frame minus its length prefix)."""
    return json.dumps(to_wire(m), sort_keys=True, separators=(",", ":"),
                      ensure_ascii=True, allow_nan=False).encode("ascii")


def encode(m: Message) -> bytes:
    payload = serialize(m)
    if len(payload) > MAX_FRAME:
        raise OversizeFrame(len(payload))
    return HEADER.pack(len(payload)) + payload


def parse_payload(payload: bytes, offset: int = HEADER.size) -> Message:
    try:
        text = payload.decode("utf-8")
        raw = json.loads(text)
        return from_wire(raw)
    except UnknownTag:
        raise
    except UnicodeDecodeError as exc:
        raise MalformedFrame(offset + exc.start, "invalid UTF-8") from None
    except json.JSONDecodeError as exc:
        raise MalformedFrame(offset + exc.pos, exc.msg) from None
    except RecursionError:
        raise MalformedFrame(offset, "nesting too deep") from None
    except (_Invalid, ValueError, TypeError, OverflowError, SafetyRefusal) as exc:
        raise MalformedFrame(offset, str(exc)) from None


def split_frame(buf: bytes | bytearray | memoryview) -> tuple[bytes, int]:
    """Return ``(payload, frame_length)`` for the frame at the start of ``buf``."""
    if len(buf) < HEADER.size:
        raise NeedMoreBytes(HEADER.size - len(buf))
    (length,) = HEADER.unpack_from(buf, 0)
    if length > MAX_FRAME:
        raise OversizeFrame(length)
    end = HEADER.size + length
    if len(buf) < end:
        raise NeedMoreBytes(end - len(buf))
    return bytes(buf[HEADER.size:end]), end


def decode(data: bytes | bytearray | memoryview) -> Message:
    """Decode exactly one frame."""
    payload, end = split_frame(data)
    if len(data) > end:
        raise MalformedFrame(end, "trailing bytes after frame")
    return parse_payload(payload)


class FrameReader:
    """Incremental decoder owning a connection's read buffer."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> None:
        self._buf += data

    def __iter__(self) -> Iterator[Message]:
        while True:
            try:
                payload, end = split_frame(self._buf)
            except NeedMoreBytes:
                return
            del self._buf[:end]
            yield parse_payload(payload)

    @property
    def buffered(self) -> int:
        return len(self._buf)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = bytearray()
    while len(chunks) < n:
        chunk = sock.recv(min(n - len(chunks), 1 << 16))
        if not chunk:
            raise ConnectionError("connection closed")
        chunks += chunk
    return bytes(chunks)


def recv_message(sock: socket.socket) -> Message:
    header = _recv_exact(sock, HEADER.size)
    (length,) = HEADER.unpack(header)
    if length > MAX_FRAME:
        raise OversizeFrame(length)
    return parse_payload(_recv_exact(sock, length))


def send_message(sock: socket.socket, m: Message) -> int:
    frame = encode(m)
    sock.sendall(frame)
    return len(frame)


# -- service-worker registration rules ----------------------------------------


@dataclass(frozen=True)
class RegistrationRequest:
    origin: str
    script_origin: str
    scope: str
    existing_scopes: frozenset[str] = frozenset()


@dataclass(frozen=True)
class RegistrationVerdict:
    accepted: bool
    reason: str | None = None

    def __bool__(self) -> bool:
        return self.accepted


ACCEPT = RegistrationVerdict(True)


def _origin_key(origin: str) -> tuple[str, str, int | None]:
    parts = urlsplit(origin)
    return parts.scheme.lower(), (parts.hostname or "").lower(), parts.port


def _segments(path: str) -> list[str]:
    return [s for s in path.split("/") if s]


def scopes_overlap(a: str, b: str) -> bool:
    """True when one scope path is a segment-wise prefix of the other."""
    sa, sb = _segments(a), _segments(b)
    n = min(len(sa), len(sb))
    return sa[:n] == sb[:n]


def validate_registration(r: RegistrationRequest) -> RegistrationVerdict:
    scheme, host, port = _origin_key(r.origin)
    if scheme != "https":
        return RegistrationVerdict(False, "InsecureScheme")
    if _origin_key(r.script_origin) != (scheme, host, port):
        return RegistrationVerdict(False, "ThirdPartyScript")
    if not r.scope.startswith("/"):
        return RegistrationVerdict(False, "RelativeScope")
    for existing in r.existing_scopes:
        if scopes_overlap(r.scope, existing):
            return RegistrationVerdict(False, "ScopeOverlap")
    return ACCEPT
