"""Executable work engines: brute-force hash search, a double-SHA256
proof-of-work stand-in, and an open-loop HTTP request flood.

Tasks are plain typed parameter records. Nothing here evaluates code
received from a peer.
"""

from __future__ import annotations

import asyncio
import enum
import hashlib
import logging
import math
import time
from dataclasses import dataclass
from functools import lru_cache
from itertools import product
from typing import Callable, Union

from .safety import RESERVED_PORTS, BlockedPort, SafetyGate, default_gate, split_target

log = logging.getLogger(__name__)

# Candidates per budget check when a slice is time-bounded.
WORK_QUANTUM = 1024
MAX_NONCE = 2**64
POW_TARGET_MAX = 2**256


class UnsupportedTask(Exception):
    """The engine does not know how to run this task kind or algorithm."""


class HashAlgorithm(str, enum.Enum):
    MD5 = "MD5"
    SHA256 = "SHA256"


_HASHERS = {
    HashAlgorithm.MD5.value: (hashlib.md5, 16),
    HashAlgorithm.SHA256.value: (hashlib.sha256, 32),
}


class HttpMethod(str, enum.Enum):
    GET = "GET"
    POST = "POST"
    OPTIONS = "OPTIONS"


@dataclass(frozen=True, order=True)
class KeyRange:
    """Half-open interval ``[start_index, end_index)`` of candidate indices."""

    start_index: int
    end_index: int

    def __post_init__(self):
        if not (0 <= self.start_index < self.end_index):
            raise ValueError(f"invalid key range [{self.start_index}, {self.end_index})")

    def __len__(self) -> int:
        return self.end_index - self.start_index

    def __contains__(self, index: object) -> bool:
        return isinstance(index, int) and self.start_index <= index < self.end_index


@dataclass(frozen=True)
class HashCrack:
    algorithm: str
    target_digest: bytes
    alphabet: str
    length: int
    range: KeyRange

    def __post_init__(self):
        if not self.alphabet or len(set(self.alphabet)) != len(self.alphabet):
            raise ValueError("alphabet must be non-empty with distinct characters")
        if self.length < 1:
            raise ValueError("length must be >= 1")
        if self.range.end_index > len(self.alphabet) ** self.length:
            raise ValueError("range exceeds the candidate space")
        known = _HASHERS.get(self.algorithm)
        if known is not None and len(self.target_digest) != known[1]:
            raise ValueError(f"{self.algorithm} digest must be {known[1]} bytes")


@dataclass(frozen=True)
class PoW:
    header: bytes
    target: int
    nonce_range: KeyRange

    def __post_init__(self):
        if not (0 <= self.target <= POW_TARGET_MAX):
            raise ValueError("PoW target must be in [0, 2**256]")
        if self.nonce_range.end_index > MAX_NONCE:
            raise ValueError("nonce range exceeds 64 bits")


@dataclass(frozen=True)
class Flood:
    """Request flood against ``target`` (``host:port``).

    The target is checked against the process safety gate at construction,
    and again by :func:`flood_run` before every connection.
    """

    target: str
    path: str = "/"
    method: str = HttpMethod.OPTIONS.value
    duration_ms: int = 1000
    max_concurrency: int = 16
    rate_cap: float | None = None
    hold_open: bool = False
    trickle_interval_ms: int = 10_000

    def __post_init__(self):
        host, port = self.host_port
        default_gate().check(host, port)
        HttpMethod(self.method)
        if not self.path.startswith("/"):
            raise ValueError("path must start with '/'")
        if self.duration_ms < 0 or self.max_concurrency < 1 or self.trickle_interval_ms <= 0:
            raise ValueError("duration_ms >= 0, max_concurrency >= 1, trickle_interval_ms > 0")
        if self.rate_cap is not None and not self.rate_cap > 0:
            raise ValueError("rate_cap must be positive or None")

    @property
    def host_port(self) -> tuple[str, int]:
        host, port, _ = split_target(self.target)
        return host, port


@dataclass(frozen=True)
class Opaque:
    """Placeholder for task kinds that are modeled but never executed."""

    label: str


TaskKind = Union[HashCrack, PoW, Flood, Opaque]


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    kind: TaskKind
    intensity_cap: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.intensity_cap <= 1.0):
            raise ValueError("intensity_cap must be in [0, 1]")


# -- candidate space -----------------------------------------------------------


def keyspace_size(alphabet_size: int, length: int) -> int:
    return alphabet_size**length


def index_to_candidate(index: int, alphabet: str, length: int) -> str:
    """Fixed-length mixed-radix expansion of ``index``, most significant first."""
    base = len(alphabet)
    if base < 1 or length < 0:
        raise ValueError("alphabet must be non-empty and length non-negative")
    if not (0 <= index < base**length):
        raise ValueError(f"index {index} outside [0, {base}**{length})")
    chars = []
    for _ in range(length):
        index, digit = divmod(index, base)
        chars.append(alphabet[digit])
    return "".join(reversed(chars))


def candidate_to_index(candidate: str, alphabet: str) -> int:
    base = len(alphabet)
    lookup = {ch: i for i, ch in enumerate(alphabet)}
    index = 0
    for ch in candidate:
        try:
            index = index * base + lookup[ch]
        except KeyError:
            raise ValueError(f"{ch!r} is not in the alphabet") from None
    return index


@lru_cache(maxsize=32)
def _suffix_table(alphabet: str, width: int) -> tuple[bytes, ...]:
    symbols = [ch.encode("utf-8") for ch in alphabet]
    return tuple(b"".join(p) for p in product(symbols, repeat=width))


def _suffix_width(base: int, length: int) -> int:
    width = 0
    while width < length and base ** (width + 1) <= 4096:
        width += 1
    return width


@dataclass(frozen=True)
class SearchStep:
    cursor: int
    finding: str | None
    examined: int


def hashcrack_search(task: HashCrack, cursor: int, max_candidates: int) -> SearchStep:
    """Scan up to ``max_candidates`` indices from ``cursor`` in index order.

    Stops right after the first candidate whose digest equals the target;
    the returned cursor then points one past it.
    """
    try:
        hasher = _HASHERS[task.algorithm][0]
    except KeyError:
        raise UnsupportedTask(f"unsupported algorithm {task.algorithm!r}") from None
    rng = task.range
    if not (rng.start_index <= cursor <= rng.end_index):
        raise ValueError(f"cursor {cursor} outside {rng}")
    stop = min(rng.end_index, cursor + max(0, max_candidates))
    if stop <= cursor:
        return SearchStep(cursor, None, 0)

    base = len(task.alphabet)
    width = _suffix_width(base, task.length)
    suffixes = _suffix_table(task.alphabet, width)
    block = base**width
    target = task.target_digest
    for p in range(cursor // block, (stop - 1) // block + 1):
        prefix = index_to_candidate(p, task.alphabet, task.length - width).encode("utf-8")
        first = p * block
        lo = max(cursor - first, 0)
        hi = min(stop - first, block)
        for j in range(lo, hi):
            candidate = prefix + suffixes[j]
            if hasher(candidate).digest() == target:
                found = first + j
                return SearchStep(found + 1, candidate.decode("utf-8"), found + 1 - cursor)
    return SearchStep(stop, None, stop - cursor)


# -- proof of work -------------------------------------------------------------


def pow_hash(header: bytes, nonce: int) -> int:
    inner = hashlib.sha256(header + nonce.to_bytes(8, "little")).digest()
    return int.from_bytes(hashlib.sha256(inner).digest(), "big")


@dataclass(frozen=True)
class PowStep:
    cursor: int
    nonce: int | None
    hashes_done: int


def pow_attempt(task: PoW, cursor: int, max_nonces: int) -> PowStep:
    rng = task.nonce_range
    if not (rng.start_index <= cursor <= rng.end_index):
        raise ValueError(f"cursor {cursor} outside {rng}")
    stop = min(rng.end_index, cursor + max(0, max_nonces))
    header, target = task.header, task.target
    sha256 = hashlib.sha256
    for nonce in range(cursor, stop):
        digest = sha256(sha256(header + nonce.to_bytes(8, "little")).digest()).digest()
        if int.from_bytes(digest, "big") < target:
            return PowStep(nonce + 1, nonce, nonce + 1 - cursor)
    return PowStep(stop, None, stop - cursor)


# -- throughput ----------------------------------------------------------------


def measure_hashrate(algorithm: str, duration_ms: float = 1000.0) -> float:
    """Single-thread brute-force throughput of this machine, hashes/second."""
    if duration_ms < 100:
        raise ValueError("duration_ms must be >= 100")
    if algorithm not in _HASHERS:
        raise UnsupportedTask(f"unsupported algorithm {algorithm!r}")
    alphabet = "abcdefghijklmnopqrstuvwxyz"
    task = HashCrack(algorithm, bytes(_HASHERS[algorithm][1]), alphabet, 6, KeyRange(0, 26**6))
    cursor = 0
    t0 = time.perf_counter()
    deadline = t0 + duration_ms / 1000.0
    while True:
        cursor = hashcrack_search(task, cursor, 4 * WORK_QUANTUM).cursor
        now = time.perf_counter()
        if now >= deadline:
            break
    return cursor / (now - t0)


# -- request flood -------------------------------------------------------------


@dataclass(frozen=True)
class FloodStats:
    attempted: int
    completed: int
    failed: int
    in_flight_at_deadline: int
    achieved_rate: float
    duration_ms: float
    peak_concurrency: int = 0

    def to_dict(self) -> dict:
        return {
            "attempted": self.attempted,
            "completed": self.completed,
            "failed": self.failed,
            "in_flight_at_deadline": self.in_flight_at_deadline,
            "achieved_rate": self.achieved_rate,
            "duration_ms": self.duration_ms,
            "peak_concurrency": self.peak_concurrency,
        }


def build_request(method: str, host: str, port: int, path: str, *, complete: bool = True) -> bytes:
    head = (
        f"{method} {path} HTTP/1.1\r\n"
        f"Host: {host}:{port}\r\n"
        "Origin: http://puppetry.invalid\r\n"
    )
    if method == HttpMethod.OPTIONS.value:
        head += "Access-Control-Request-Method: POST\r\n"
    if not complete:
        return head.encode("ascii")
    if method == HttpMethod.POST.value:
        head += "Content-Length: 0\r\n"
    return (head + "Connection: close\r\n\r\n").encode("ascii")


async def flood_async(
    task: Flood,
    *,
    gate: SafetyGate | None = None,
    drain_ms: float = 5000.0,
) -> FloodStats:
    gate = gate or default_gate()
    host, port = task.host_port
    gate.check(host, port)
    if port in RESERVED_PORTS:
        raise BlockedPort(f"port {port} is reserved")

    loop = asyncio.get_running_loop()
    request = build_request(task.method, host, port, task.path)
    sem = asyncio.Semaphore(task.max_concurrency)
    counts = {"completed": 0, "failed": 0, "live": 0, "peak": 0}
    start = loop.time()
    deadline = start + task.duration_ms / 1000.0

    async def one() -> None:
        try:
            # socket-construction boundary: re-check every connection
            gate.check(host, port)
            reader, writer = await asyncio.open_connection(host, port)
            counts["live"] += 1
            counts["peak"] = max(counts["peak"], counts["live"])
            try:
                if task.hold_open:
                    await _hold(writer, deadline)
                    return
                writer.write(request)
                await writer.drain()
                status = await reader.readline()
                if not status.startswith(b"HTTP/"):
                    raise ConnectionError("no HTTP response")
                await reader.read()
                counts["completed"] += 1
            finally:
                counts["live"] -= 1
                writer.close()
        except (OSError, ConnectionError, asyncio.IncompleteReadError):
            counts["failed"] += 1
        finally:
            sem.release()

    async def _hold(writer: asyncio.StreamWriter, until: float) -> None:
        writer.write(build_request(task.method, host, port, task.path, complete=False))
        await writer.drain()
        n = 0
        while True:
            remaining = until - loop.time()
            if remaining <= 0:
                break
            await asyncio.sleep(min(remaining, task.trickle_interval_ms / 1000.0))
            if loop.time() < until:
                n += 1
                writer.write(f"X-Trickle-{n}: 1\r\n".encode("ascii"))
                await writer.drain()
        raise _HeldToDeadline

    attempted = 0
    held = 0
    tasks: set[asyncio.Task] = set()

    def _done(t: asyncio.Task) -> None:
        nonlocal held
        tasks.discard(t)
        if not t.cancelled() and isinstance(t.exception(), _HeldToDeadline):
            held += 1

    while True:
        if task.rate_cap:
            # slot i is [i/r, (i+1)/r); only slots that fit inside the window are used
            if (attempted + 1) * 1000.0 / task.rate_cap > task.duration_ms:
                break
            scheduled = start + attempted / task.rate_cap
            delay = scheduled - loop.time()
            if delay > 0:
                await asyncio.sleep(delay)
        await sem.acquire()
        if loop.time() >= deadline:
            sem.release()
            break
        attempted += 1
        t = loop.create_task(one())
        tasks.add(t)
        t.add_done_callback(_done)

    in_flight = 0
    if tasks:
        grace = max(0.0, deadline - loop.time()) + drain_ms / 1000.0
        _, pending = await asyncio.wait(set(tasks), timeout=grace)
        for t in pending:
            t.cancel()
        in_flight = len(pending)
        if pending:
            await asyncio.wait(pending)
    elapsed_ms = max(task.duration_ms, 1e-9)
    return FloodStats(
        attempted=attempted,
        completed=counts["completed"],
        failed=counts["failed"],
        in_flight_at_deadline=in_flight + held,
        achieved_rate=attempted * 1000.0 / elapsed_ms,
        duration_ms=float(task.duration_ms),
        peak_concurrency=counts["peak"],
    )


class _HeldToDeadline(Exception):
    """A hold-open connection stayed incomplete until the flood deadline."""


def flood_run(
    task: Flood,
    clock: Callable[[], float] | None = None,
    *,
    gate: SafetyGate | None = None,
    drain_ms: float = 5000.0,
) -> FloodStats:
    """Run ``task`` to completion on a private event loop.

    ``clock`` is accepted for interface symmetry with the simulated path;
    live floods always pace against the event loop's monotonic clock.
    """
    del clock
    return asyncio.run(flood_async(task, gate=gate, drain_ms=drain_ms))


def expected_nonces(target: int) -> float:
    """Mean nonces until success for a uniform 256-bit hash and ``target``."""
    if target <= 0:
        return math.inf
    return POW_TARGET_MAX / target
