"""Loopback HTTP sink: the measurement point that stands in for a flood victim.

It parses only what the flood emits (request line, headers, an optional
small body), answers ``204``, and keeps counters under a single lock so a
snapshot never shows torn per-method totals.
"""

from __future__ import annotations

import asyncio
import enum
import json
import threading
import time
from dataclasses import dataclass, field
from typing import Any

from .protocol import MAX_FRAME
from .safety import SafetyGate, default_gate


class CorsMode(str, enum.Enum):
    ALLOW_ALL = "allow"
    DENY = "deny"


@dataclass(frozen=True)
class SinkStats:
    total_requests: int = 0
    per_method: dict[str, int] = field(default_factory=dict)
    bytes_received: int = 0
    first_ts: float | None = None
    last_ts: float | None = None
    per_second: dict[int, int] = field(default_factory=dict)
    open_connections: int = 0
    peak_connections: int = 0
    connections_total: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "total_requests": self.total_requests,
            "per_method": dict(sorted(self.per_method.items())),
            "bytes_received": self.bytes_received,
            "first_ts": self.first_ts,
            "last_ts": self.last_ts,
            "per_second": {str(k): v for k, v in sorted(self.per_second.items())},
            "open_connections": self.open_connections,
            "peak_connections": self.peak_connections,
            "connections_total": self.connections_total,
        }


class _Counters:
    def __init__(self):
        self.lock = threading.Lock()
        self.total = 0
        self.per_method: dict[str, int] = {}
        self.bytes = 0
        self.first: float | None = None
        self.last: float | None = None
        self.per_second: dict[int, int] = {}
        self.open = 0
        self.peak = 0
        self.connections = 0

    def connect(self) -> None:
        with self.lock:
            self.open += 1
            self.connections += 1
            self.peak = max(self.peak, self.open)

    def disconnect(self) -> None:
        with self.lock:
            self.open -= 1

    def add_bytes(self, n: int) -> None:
        with self.lock:
            self.bytes += n

    def request(self, method: str) -> None:
        now = time.time()
        with self.lock:
            self.total += 1
            self.per_method[method] = self.per_method.get(method, 0) + 1
            if self.first is None:
                self.first = now
            self.last = now
            sec = int(now)
            self.per_second[sec] = self.per_second.get(sec, 0) + 1

    def snapshot(self) -> SinkStats:
        with self.lock:
            return SinkStats(self.total, dict(self.per_method), self.bytes, self.first, self.last,
                             dict(self.per_second), self.open, self.peak, self.connections)


def _response(cors: CorsMode, close: bool) -> bytes:
    lines = ["HTTP/1.1 204 No Content"]
    if cors is CorsMode.ALLOW_ALL:
        lines.append("Access-Control-Allow-Origin: *")
        lines.append("Access-Control-Allow-Methods: GET, POST, OPTIONS")
    lines.append("Connection: close" if close else "Connection: keep-alive")
    return ("\r\n".join(lines) + "\r\n\r\n").encode("ascii")


def _parse_head(head: bytes) -> tuple[str, dict[str, str], str]:
    text = head.decode("latin-1")
    request_line, *header_lines = text.split("\r\n")
    parts = request_line.split(" ")
    method = parts[0].upper() if parts and parts[0] else "INVALID"
    version = parts[2] if len(parts) >= 3 else "HTTP/1.0"
    headers = {}
    for line in header_lines:
        name, sep, value = line.partition(":")
        if sep:
            headers[name.strip().lower()] = value.strip()
    return method, headers, version


class SinkHandle:
    def __init__(self, cors: CorsMode, max_request_bytes: int):
        self.cors = cors
        self.max_request_bytes = max_request_bytes
        self.address: tuple[str, int] = ("", 0)
        self._counters = _Counters()
        self._loop: asyncio.AbstractEventLoop | None = None
        self._server: asyncio.base_events.Server | None = None
        self._thread: threading.Thread | None = None
        self._handlers: set[asyncio.Task] = set()
        self._ready = threading.Event()
        self._error: BaseException | None = None

    def stats(self) -> SinkStats:
        return self._counters.snapshot()

    def __enter__(self) -> SinkHandle:
        return self

    def __exit__(self, *exc) -> None:
        self.stop()

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        counters = self._counters
        counters.connect()
        task = asyncio.current_task()
        self._handlers.add(task)
        try:
            while True:
                try:
                    head = await reader.readuntil(b"\r\n\r\n")
                except (asyncio.IncompleteReadError, asyncio.LimitOverrunError, ConnectionError):
                    break
                counters.add_bytes(len(head))
                method, headers, version = _parse_head(head)
                length = headers.get("content-length", "0")
                body = int(length) if length.isdigit() else 0
                if body > self.max_request_bytes:
                    break
                if body:
                    try:
                        await reader.readexactly(body)
                    except (asyncio.IncompleteReadError, ConnectionError):
                        break
                    counters.add_bytes(body)
                # websocket upgrade attempts are folded into their method's count
                counters.request(method)
                tokens = {t.strip().lower() for t in headers.get("connection", "").split(",")}
                close = "close" in tokens or version == "HTTP/1.0"
                writer.write(_response(self.cors, close))
                try:
                    await writer.drain()
                except ConnectionError:
                    break
                if close:
                    break
        finally:
            counters.disconnect()
            self._handlers.discard(task)
            writer.close()

    def _run(self, host: str, port: int) -> None:
        loop = asyncio.new_event_loop()
        self._loop = loop
        asyncio.set_event_loop(loop)
        try:
            self._server = loop.run_until_complete(
                asyncio.start_server(self._handle, host, port, limit=self.max_request_bytes, backlog=1024))
            self.address = self._server.sockets[0].getsockname()[:2]
        except BaseException as exc:  # bind failure is reported to start_sink
            self._error = exc
            self._ready.set()
            loop.close()
            return
        self._ready.set()
        try:
            loop.run_forever()
        finally:
            self._server.close()
            for t in list(self._handlers):
                t.cancel()
            loop.run_until_complete(asyncio.sleep(0))
            loop.run_until_complete(self._server.wait_closed())
            loop.close()

    def stop(self) -> SinkStats:
        if self._loop is not None and self._thread is not None and self._thread.is_alive():
            self._loop.call_soon_threadsafe(self._loop.stop)
            self._thread.join(timeout=5.0)
        return self.stats()


def start_sink(
    bind_address: tuple[str, int] = ("127.0.0.1", 0),
    cors_mode: CorsMode | str = CorsMode.ALLOW_ALL,
    *,
    allow_non_loopback: bool = False,
    gate: SafetyGate | None = None,
    max_request_bytes: int = MAX_FRAME,
) -> SinkHandle:
    host, port = bind_address
    if not allow_non_loopback:
        (gate or default_gate()).check_bind(host)
    handle = SinkHandle(CorsMode(cors_mode), max_request_bytes)
    handle._thread = threading.Thread(target=handle._run, args=(host, port), name="sink", daemon=True)
    handle._thread.start()
    handle._ready.wait()
    if handle._error is not None:
        raise handle._error
    return handle


def sink_stats(handle: SinkHandle) -> SinkStats:
    return handle.stats()


def dump_stats(stats: SinkStats) -> str:
    return json.dumps(stats.to_dict(), sort_keys=True, indent=2)
