"""Command-and-control side: servant registry, keyspace partitioning,
scheduling with heartbeat-driven reassignment, AIMD throttling, and a TCP
front end that serializes every command through one controller thread.
"""

from __future__ import annotations

import hashlib
import json
import logging
import queue
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Any, Callable, Iterable

from .calibration import BatteryStatus
from .protocol import (
    DEFAULT_HEARTBEAT_MS,
    CodecError,
    Heartbeat,
    Message,
    ProtocolError,
    Register,
    RegisterAck,
    RegistrationRequest,
    TaskAssign,
    TaskResult,
    Throttle,
    encode,
    recv_message,
    serialize,
    validate_registration,
)
from .safety import SafetyGate, default_gate
from .workloads import HashCrack, KeyRange, TaskSpec

log = logging.getLogger(__name__)

MISSED_HEARTBEATS = 3
MAX_KEYSPACE = 2**128

__all__ = [
    "KeyRange",
    "MISSED_HEARTBEATS",
    "EventLog",
    "Puppeteer",
    "PuppeteerServer",
    "ServantRecord",
    "ThrottlePolicy",
    "partition_keyspace",
    "throttle_decision",
]


class DomainError(ValueError):
    pass


def partition_keyspace(alphabet_size: int, length: int, parts: int) -> list[KeyRange]:
    """Split ``[0, alphabet_size**length)`` into contiguous, balanced ranges.

    Sizes differ by at most one; larger ranges come first. If ``parts``
    exceeds the number of candidates, one range per candidate is returned.
    """
    if parts < 1 or alphabet_size < 1 or length < 1:
        raise DomainError("parts, alphabet_size and length must all be >= 1")
    total = alphabet_size**length
    if total > MAX_KEYSPACE:
        raise DomainError(f"candidate space {alphabet_size}**{length} exceeds 128 bits")
    parts = min(parts, total)
    size, extra = divmod(total, parts)
    ranges = []
    start = 0
    for i in range(parts):
        end = start + size + (1 if i < extra else 0)
        ranges.append(KeyRange(start, end))
        start = end
    return ranges


@dataclass(frozen=True)
class ThrottlePolicy:
    target_utilization: float = 1.0
    battery_floor: float = 0.2
    pause_on_discharge_below_floor: bool = True
    step_up: float = 0.1
    backoff: float = 0.5

    def __post_init__(self):
        if not (0.0 < self.target_utilization <= 1.0):
            raise ValueError("target_utilization must be in (0, 1]")
        if not (0.0 <= self.battery_floor <= 1.0):
            raise ValueError("battery_floor must be in [0, 1]")
        if not (0.0 < self.backoff < 1.0):
            raise ValueError("backoff must be in (0, 1)")
        if self.step_up < 0:
            raise ValueError("step_up must be >= 0")


def throttle_decision(hb: Heartbeat, pol: ThrottlePolicy, current_intensity: float) -> Throttle:
    """Additive increase / multiplicative decrease toward the target load."""
    battery = hb.battery
    if pol.pause_on_discharge_below_floor and not battery.charging and battery.level < pol.battery_floor:
        return Throttle(current_intensity, pause=True)
    if hb.utilization > pol.target_utilization:
        return Throttle(current_intensity * pol.backoff, pause=False)
    return Throttle(min(1.0, current_intensity + pol.step_up), pause=False)


# -- registry and scheduling ---------------------------------------------------


@dataclass
class ServantRecord:
    id: str
    last_heartbeat: float
    last_utilization: float = 0.0
    battery: BatteryStatus = field(default_factory=BatteryStatus)
    assigned: list[str] = field(default_factory=list)
    scopes: set[str] = field(default_factory=set)
    intensity: float = 1.0
    paused: bool = False
    alive: bool = True
    order: int = 0
    last_seq: int = 0
    work_done: int = 0
    busy_s: float = 0.0


@dataclass
class Subtask:
    id: str
    job_id: str
    spec: TaskSpec
    span: KeyRange
    status: str = "pending"  # pending | assigned | done | cancelled
    servant: str | None = None
    assigned_at: float | None = None


@dataclass
class Job:
    id: str
    subtasks: list[str]
    status: str = "running"  # running | completed | exhausted
    finding: str | None = None
    finished_at: float | None = None


class EventLog:
    """JSONL event sink; one object per line with ``t_ms`` and ``event``."""

    def __init__(self, stream: IO[str] | None = None, keep: bool = True):
        self.stream = stream
        self.keep = keep
        self.records: list[dict[str, Any]] = []

    def emit(self, t: float, event: str, **fields: Any) -> None:
        record = {"t_ms": round(t * 1000.0, 3), "event": event, **fields}
        if self.keep:
            self.records.append(record)
        if self.stream is not None:
            self.stream.write(json.dumps(record, sort_keys=True) + "\n")

    def lines(self) -> list[str]:
        return [json.dumps(r, sort_keys=True) for r in self.records]


def _verify_finding(spec: TaskSpec, finding: str) -> bool:
    kind = spec.kind
    if not isinstance(kind, HashCrack):
        return True
    hasher = {"MD5": hashlib.md5, "SHA256": hashlib.sha256}.get(kind.algorithm)
    return hasher is not None and hasher(finding.encode("utf-8")).digest() == kind.target_digest


class Puppeteer:
    """Registry, job table and scheduler. Single-threaded by contract.

    All mutating methods take ``now`` in seconds so the same object runs
    under a wall clock (TCP server) or a virtual one (simulation, tests).
    """

    def __init__(
        self,
        heartbeat_interval_ms: int = DEFAULT_HEARTBEAT_MS,
        policy: ThrottlePolicy | None = None,
        log_: EventLog | None = None,
        miss_threshold: int = MISSED_HEARTBEATS,
    ):
        self.heartbeat_interval_ms = heartbeat_interval_ms
        self.policy = policy or ThrottlePolicy()
        self.log = log_ or EventLog()
        self.miss_threshold = miss_threshold
        self.servants: dict[str, ServantRecord] = {}
        self.jobs: dict[str, Job] = {}
        self.subtasks: dict[str, Subtask] = {}
        self.pending: deque[str] = deque()
        self._next_order = 0
        self.job_listeners: list[Callable[[Job], None]] = []

    # registry
    def register(self, msg: Register, now: float, size: int = 0) -> RegisterAck | ProtocolError:
        rec = self.servants.get(msg.servant_id)
        existing = rec.scopes if rec else set()
        verdict = validate_registration(RegistrationRequest(
            msg.origin, msg.origin, msg.scope, frozenset(s for s in existing if s != msg.scope)))
        if not verdict.accepted:
            self.log.emit(now, "register_rejected", servant_id=msg.servant_id, reason=verdict.reason, size=size)
            return ProtocolError("RegistrationRejected", verdict.reason or "")
        if rec is None:
            rec = ServantRecord(msg.servant_id, last_heartbeat=now, order=self._next_order)
            self._next_order += 1
            self.servants[msg.servant_id] = rec
        rec.scopes.add(msg.scope)
        rec.alive = True
        rec.last_heartbeat = now
        self.log.emit(now, "register", servant_id=msg.servant_id, origin=msg.origin, scope=msg.scope,
                      browser=msg.browser_name, size=size)
        return RegisterAck(msg.servant_id, self.heartbeat_interval_ms)

    def heartbeat(self, hb: Heartbeat, now: float, size: int = 0) -> Throttle | None:
        """Record a heartbeat; returns a throttle command when it changes."""
        rec = self.servants.get(hb.servant_id)
        if rec is None:
            self.log.emit(now, "protocol_error", servant_id=hb.servant_id, code="UnknownServant", size=size)
            return None
        rec.last_heartbeat = now
        rec.last_utilization = hb.utilization
        rec.battery = hb.battery
        if hb.seq <= rec.last_seq:
            self.log.emit(now, "protocol_error", servant_id=hb.servant_id, code="NonMonotonicSeq", seq=hb.seq)
        rec.last_seq = max(rec.last_seq, hb.seq)
        if not rec.alive:
            rec.alive = True
            self.log.emit(now, "servant_returned", servant_id=rec.id)
        self.log.emit(now, "heartbeat", servant_id=hb.servant_id, seq=hb.seq, utilization=hb.utilization,
                      battery=hb.battery.to_dict(), sent_ms=hb.timestamp_ms, size=size)
        decision = throttle_decision(hb, self.policy, rec.intensity)
        if not rec.assigned:
            decision = Throttle(decision.intensity, pause=True)
        return self._set_throttle(rec, decision, now)

    def _set_throttle(self, rec: ServantRecord, t: Throttle, now: float) -> Throttle | None:
        if (t.intensity, t.pause) == (rec.intensity, rec.paused):
            return None
        rec.intensity, rec.paused = t.intensity, t.pause
        self.log.emit(now, "throttle", servant_id=rec.id, intensity=t.intensity, pause=t.pause)
        return t

    def _battery_low(self, battery: BatteryStatus) -> bool:
        pol = self.policy
        return pol.pause_on_discharge_below_floor and not battery.charging and battery.level < pol.battery_floor

    def active_servants(self) -> list[ServantRecord]:
        return sorted((r for r in self.servants.values() if r.alive), key=lambda r: r.order)

    # jobs
    def submit_job(self, job_id: str, tasks: Iterable[TaskSpec], spans: Iterable[KeyRange], now: float) -> Job:
        if job_id in self.jobs:
            raise ValueError(f"duplicate job {job_id!r}")
        job = Job(job_id, [])
        for spec, span in zip(tasks, spans):
            self.subtasks[spec.task_id] = Subtask(spec.task_id, job_id, spec, span)
            job.subtasks.append(spec.task_id)
            self.pending.append(spec.task_id)
        self.jobs[job_id] = job
        self.log.emit(now, "job_submitted", job_id=job_id, subtasks=len(job.subtasks))
        return job

    def submit_crack(self, job_id: str, algorithm: str, digest: bytes, alphabet: str, length: int,
                     parts: int, now: float) -> Job:
        spans = partition_keyspace(len(alphabet), length, parts)
        specs = [TaskSpec(f"{job_id}/{i}", HashCrack(algorithm, digest, alphabet, length, span))
                 for i, span in enumerate(spans)]
        return self.submit_job(job_id, specs, spans, now)

    def reap(self, now: float) -> list[str]:
        """Return subtasks of servants silent for too long to the queue."""
        limit = self.miss_threshold * self.heartbeat_interval_ms / 1000.0
        requeued = []
        for rec in self.active_servants():
            if now - rec.last_heartbeat <= limit:
                continue
            rec.alive = False
            self.log.emit(now, "servant_timeout", servant_id=rec.id, silent_s=round(now - rec.last_heartbeat, 3))
            for task_id in reversed(rec.assigned):
                sub = self.subtasks[task_id]
                sub.status, sub.servant, sub.assigned_at = "pending", None, None
                self.pending.appendleft(task_id)
                requeued.append(task_id)
                self.log.emit(now, "reassign", task_id=task_id, from_servant=rec.id)
            rec.assigned.clear()
        return requeued

    def schedule(self, now: float) -> list[tuple[str, Message]]:
        """Reap silent servants, then hand every pending subtask to the
        least-loaded live servant. Returns ``(servant_id, message)`` pairs;
        a resume throttle precedes work sent to a paused servant."""
        self.reap(now)
        active = self.active_servants()
        out: list[tuple[str, Message]] = []
        if not active:
            return out
        while self.pending:
            task_id = self.pending.popleft()
            sub = self.subtasks[task_id]
            rec = min(active, key=lambda r: (len(r.assigned), r.order))
            if rec.paused and not self._battery_low(rec.battery):
                resume = self._set_throttle(rec, Throttle(rec.intensity, False), now)
                if resume is not None:
                    out.append((rec.id, resume))
            sub.status, sub.servant, sub.assigned_at = "assigned", rec.id, now
            rec.assigned.append(task_id)
            out.append((rec.id, TaskAssign(sub.spec)))
            self.log.emit(now, "assign", servant_id=rec.id, task_id=task_id,
                          range=[sub.span.start_index, sub.span.end_index])
        return out

    def record_result(self, servant_id: str, result: TaskResult, now: float,
                      size: int = 0) -> list[tuple[str, Message]]:
        """Apply a task result. Idempotent for duplicates and late reports."""
        sub = self.subtasks.get(result.task_id)
        if sub is None:
            self.log.emit(now, "protocol_error", servant_id=servant_id, code="UnknownTask", task_id=result.task_id)
            return [(servant_id, ProtocolError("UnknownTask", result.task_id))]
        job = self.jobs[sub.job_id]
        payload = result.payload
        self.log.emit(now, "result", servant_id=servant_id, task_id=result.task_id, status=payload.status,
                      finding=payload.finding, work_done=payload.work_done, size=size)
        rec = self.servants.get(servant_id)
        if rec is not None:
            rec.work_done += payload.work_done
            if sub.servant == servant_id and sub.assigned_at is not None:
                rec.busy_s += max(0.0, now - sub.assigned_at)
        out: list[tuple[str, Message]] = []

        if payload.status == "found" and payload.finding is not None:
            if not _verify_finding(sub.spec, payload.finding):
                self.log.emit(now, "protocol_error", servant_id=servant_id, code="BadFinding", task_id=sub.id)
                return [(servant_id, ProtocolError("BadFinding", sub.id))]
            self._finish_subtask(sub, "done")
            if job.status == "running":
                job.status, job.finding, job.finished_at = "completed", payload.finding, now
                self.log.emit(now, "job_completed", job_id=job.id, finding=payload.finding, task_id=sub.id)
                out.extend(self._cancel_siblings(job, now))
                self._notify(job)
            return out

        if sub.status in ("done", "cancelled"):
            return out
        self._finish_subtask(sub, "done")
        if job.status == "running" and all(self.subtasks[t].status == "done" for t in job.subtasks):
            job.status, job.finished_at = "exhausted", now
            self.log.emit(now, "job_exhausted", job_id=job.id)
            self._notify(job)
        if rec is not None and not rec.assigned:
            t = self._set_throttle(rec, Throttle(rec.intensity, True), now)
            if t is not None:
                out.append((servant_id, t))
        return out

    def _finish_subtask(self, sub: Subtask, status: str) -> None:
        if sub.status == "pending":
            self.pending.remove(sub.id)
        if sub.servant is not None:
            holder = self.servants.get(sub.servant)
            if holder is not None and sub.id in holder.assigned:
                holder.assigned.remove(sub.id)
        sub.status, sub.servant = status, None

    def _cancel_siblings(self, job: Job, now: float) -> list[tuple[str, Message]]:
        out = []
        touched = set()
        for task_id in job.subtasks:
            sub = self.subtasks[task_id]
            if sub.status in ("pending", "assigned"):
                if sub.servant:
                    touched.add(sub.servant)
                self._finish_subtask(sub, "cancelled")
                self.log.emit(now, "cancel", task_id=task_id)
        for servant_id in sorted(touched):
            rec = self.servants[servant_id]
            if not rec.assigned:
                t = self._set_throttle(rec, Throttle(rec.intensity, True), now)
                if t is not None:
                    out.append((servant_id, t))
        return out

    def _notify(self, job: Job) -> None:
        for listener in self.job_listeners:
            listener(job)

    def ranges_by_status(self, job_id: str) -> dict[str, list[KeyRange]]:
        """Current key ranges of ``job_id`` grouped as pending/assigned/completed."""
        groups: dict[str, list[KeyRange]] = {"pending": [], "assigned": [], "completed": []}
        for task_id in self.jobs[job_id].subtasks:
            sub = self.subtasks[task_id]
            key = "completed" if sub.status in ("done", "cancelled") else sub.status
            groups[key].append(sub.span)
        return groups

    def throughput(self) -> dict[str, float]:
        return {sid: (r.work_done / r.busy_s if r.busy_s > 0 else 0.0) for sid, r in self.servants.items()}


# -- TCP front end -------------------------------------------------------------


class _Connection:
    def __init__(self, conn_id: int, sock: socket.socket):
        self.id = conn_id
        self.sock = sock
        self.servant_id: str | None = None
        self.lock = threading.Lock()

    def send(self, m: Message) -> None:
        frame = encode(m)
        with self.lock:
            self.sock.sendall(frame)


class PuppeteerServer:
    """Loopback TCP listener feeding a single controller thread.

    Connection handler threads only decode frames and enqueue commands; the
    controller owns the :class:`Puppeteer` and is the only writer of its state.
    """

    def __init__(
        self,
        puppeteer: Puppeteer,
        bind: tuple[str, int] = ("127.0.0.1", 0),
        gate: SafetyGate | None = None,
        tick_s: float = 0.05,
    ):
        (gate or default_gate()).check_bind(bind[0])
        self.puppeteer = puppeteer
        self.tick_s = tick_s
        self._listener = socket.create_server(bind, reuse_port=False)
        self.address = self._listener.getsockname()[:2]
        self._commands: queue.Queue = queue.Queue()
        self._conns: dict[int, _Connection] = {}
        self._by_servant: dict[str, _Connection] = {}
        self._stop = threading.Event()
        self._job_events: dict[str, threading.Event] = {}
        self._threads: list[threading.Thread] = []
        self._next_conn = 0
        puppeteer.job_listeners.append(self._on_job_done)

    def start(self) -> PuppeteerServer:
        for target, name in ((self._accept_loop, "puppeteer-accept"), (self._control_loop, "puppeteer-control")):
            t = threading.Thread(target=target, name=name, daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def __enter__(self) -> PuppeteerServer:
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    # commands from other threads
    def submit(self, fn: Callable[[Puppeteer, float], Any]) -> None:
        self._commands.put(("call", fn))

    def job_event(self, job_id: str) -> threading.Event:
        return self._job_events.setdefault(job_id, threading.Event())

    def wait_job(self, job_id: str, timeout: float | None = None) -> Job | None:
        if self.job_event(job_id).wait(timeout):
            return self.puppeteer.jobs[job_id]
        return None

    def _on_job_done(self, job: Job) -> None:
        self.job_event(job.id).set()

    def disconnect_all(self) -> None:
        self._commands.put(("close_all", None))

    def stop(self) -> None:
        self._stop.set()
        try:
            self._listener.close()
        except OSError:
            pass
        for conn in list(self._conns.values()):
            _close(conn.sock)
        for t in self._threads:
            t.join(timeout=2.0)

    # threads
    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._next_conn += 1
            conn = _Connection(self._next_conn, sock)
            self._commands.put(("open", conn))
            threading.Thread(target=self._read_loop, args=(conn,), daemon=True,
                             name=f"puppeteer-conn-{conn.id}").start()

    def _read_loop(self, conn: _Connection) -> None:
        try:
            while not self._stop.is_set():
                m = recv_message(conn.sock)
                self._commands.put(("msg", conn, m, len(serialize(m)) + 4, time.time()))
        except CodecError as exc:
            self._commands.put(("codec_error", conn, exc))
        except (OSError, ConnectionError):
            pass
        self._commands.put(("closed", conn))

    def _control_loop(self) -> None:
        p = self.puppeteer
        last_tick = 0.0
        while not self._stop.is_set():
            try:
                cmd = self._commands.get(timeout=self.tick_s)
            except queue.Empty:
                cmd = None
            now = time.time()
            out: list[tuple[str, Message]] = []
            if cmd is not None:
                kind = cmd[0]
                if kind == "open":
                    self._conns[cmd[1].id] = cmd[1]
                elif kind == "closed":
                    conn = self._conns.pop(cmd[1].id, None)
                    if conn is not None and conn.servant_id:
                        self._by_servant.pop(conn.servant_id, None)
                        p.log.emit(now, "disconnect", servant_id=conn.servant_id)
                elif kind == "codec_error":
                    conn, exc = cmd[1], cmd[2]
                    p.log.emit(now, "protocol_error", servant_id=conn.servant_id, code=type(exc).__name__)
                    self._safe_send(conn, ProtocolError(type(exc).__name__, str(exc)))
                elif kind == "call":
                    cmd[1](p, now)
                elif kind == "close_all":
                    for conn in list(self._conns.values()):
                        _close(conn.sock)
                elif kind == "msg":
                    out = self._dispatch(cmd[1], cmd[2], cmd[3], cmd[4])
            if cmd is None or now - last_tick >= self.tick_s or (cmd and cmd[0] == "call"):
                out.extend(p.schedule(now))
                last_tick = now
            for servant_id, m in out:
                conn = self._by_servant.get(servant_id)
                if conn is not None:
                    self._safe_send(conn, m)

    def _dispatch(self, conn: _Connection, m: Message, size: int, t: float) -> list[tuple[str, Message]]:
        p = self.puppeteer
        if isinstance(m, Register):
            reply = p.register(m, t, size)
            if isinstance(reply, RegisterAck):
                conn.servant_id = m.servant_id
                self._by_servant[m.servant_id] = conn
            self._safe_send(conn, reply)
            return []
        if conn.servant_id is None:
            self._safe_send(conn, ProtocolError("NotRegistered", type(m).__name__))
            return []
        if isinstance(m, Heartbeat):
            t_cmd = p.heartbeat(m, t, size)
            return [(conn.servant_id, t_cmd)] if t_cmd is not None else []
        if isinstance(m, TaskResult):
            return p.record_result(conn.servant_id, m, t, size)
        if isinstance(m, ProtocolError):
            p.log.emit(t, "servant_error", servant_id=conn.servant_id, code=m.code, detail=m.detail)
            return []
        self._safe_send(conn, ProtocolError("UnexpectedMessage", type(m).__name__))
        return []

    def _safe_send(self, conn: _Connection, m: Message) -> None:
        try:
            conn.send(m)
        except OSError:
            pass


def _close(sock: socket.socket) -> None:
    try:
        sock.shutdown(socket.SHUT_RDWR)
    except OSError:
        pass
    sock.close()


def read_event_log(path: str | Path) -> list[dict[str, Any]]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records

