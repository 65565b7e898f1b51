"""Countermeasures as analyses: beacon detection over heartbeat metadata,
plaintext signature scanning, and worker registration/uptime policies.

Detectors only look at timestamps and sizes, never payload content, so they
work the same on encrypted channels.
"""

from __future__ import annotations

import enum
import json
import random
import statistics
from dataclasses import asdict, dataclass
from typing import IO, Any, Iterable, Mapping, Sequence
from urllib.parse import urlsplit

from .calibration import load_calibration
from .protocol import encode
from .puppeteer import EventLog, Puppeteer
from .servant import Servant

DEFAULT_CV_THRESHOLD = 0.1
DEFAULT_MIN_COUNT = 10
DEFAULT_BIN_MS = 1000.0


class EmptyTrace(ValueError):
    """A trace with no messages has no flow statistics."""


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TraceMessage:
    t_ms: float
    size: int = 0


@dataclass(frozen=True)
class FlowFeatures:
    message_count: int
    inter_arrival_mean_ms: float
    inter_arrival_cv: float
    payload_size_mean: float
    payload_size_cv: float
    duty_cycle: float

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def _cv(values: Sequence[float]) -> float:
    if len(values) < 2:
        return 0.0
    mean = statistics.fmean(values)
    if mean == 0:
        return 0.0
    return statistics.pstdev(values) / abs(mean)


def extract_features(trace: Sequence[TraceMessage], bin_ms: float = DEFAULT_BIN_MS) -> FlowFeatures:
    """Flow statistics of a timestamp-sorted trace.

    Coefficients of variation use the population standard deviation.
    ``duty_cycle`` is the share of fixed ``bin_ms`` bins between the first
    and last message that contain at least one message.
    """
    if not trace:
        raise EmptyTrace("trace has no messages")
    if bin_ms <= 0:
        raise ConfigError("bin_ms must be > 0")
    times = [m.t_ms for m in trace]
    if any(b < a for a, b in zip(times, times[1:])):
        raise ValueError("trace must be sorted by timestamp")
    gaps = [b - a for a, b in zip(times, times[1:])]
    sizes = [float(m.size) for m in trace]
    first = times[0]
    bins = int((times[-1] - first) // bin_ms) + 1
    occupied = len({int((t - first) // bin_ms) for t in times})
    return FlowFeatures(
        message_count=len(trace),
        inter_arrival_mean_ms=statistics.fmean(gaps) if gaps else 0.0,
        inter_arrival_cv=_cv(gaps),
        payload_size_mean=statistics.fmean(sizes),
        payload_size_cv=_cv(sizes),
        duty_cycle=occupied / bins,
    )


@dataclass(frozen=True)
class Verdict:
    flagged: bool
    score: float


def detect_beacon(f: FlowFeatures, cv_threshold: float = DEFAULT_CV_THRESHOLD,
                  min_count: int = DEFAULT_MIN_COUNT) -> Verdict:
    score = 1.0 - f.inter_arrival_cv / cv_threshold if cv_threshold > 0 else 0.0
    score = min(1.0, max(0.0, score))
    flagged = f.message_count >= min_count and f.inter_arrival_cv < cv_threshold
    return Verdict(flagged, score)


@dataclass(frozen=True)
class SignatureMatch:
    pattern: bytes
    offset: int


def signature_scan(payload: bytes, signatures: Iterable[bytes]) -> list[SignatureMatch]:
    """All non-overlapping leftmost matches of each pattern, in pattern order."""
    matches = []
    for pattern in signatures:
        if not pattern:
            raise ConfigError("empty signature pattern")
        start = payload.find(pattern)
        while start != -1:
            matches.append(SignatureMatch(bytes(pattern), start))
            start = payload.find(pattern, start + len(pattern))
    return matches


# -- policy --------------------------------------------------------------------


class DenyReason(str, enum.Enum):
    NOT_WHITELISTED = "NotWhitelisted"
    TIME_CAP = "TimeCap"
    NO_CONSENT = "NoConsent"


@dataclass(frozen=True)
class Decision:
    allowed: bool
    reason: DenyReason | None = None

    def __bool__(self) -> bool:
        return self.allowed


ALLOW = Decision(True)


@dataclass(frozen=True)
class PolicyConfig:
    whitelist: frozenset[str] = frozenset()
    sw_time_cap_ms: float | None = None
    click_to_activate: bool = False
    consent_grant_prob: float = 0.12

    def __post_init__(self):
        if not (0.0 <= self.consent_grant_prob <= 1.0):
            raise ConfigError("consent_grant_prob must be in [0, 1]")
        if self.sw_time_cap_ms is not None and self.sw_time_cap_ms < 0:
            raise ConfigError("sw_time_cap_ms must be >= 0")
        object.__setattr__(self, "whitelist", frozenset(self.whitelist))

    def to_dict(self) -> dict[str, Any]:
        return {"whitelist": sorted(self.whitelist), "sw_time_cap_ms": self.sw_time_cap_ms,
                "click_to_activate": self.click_to_activate, "consent_grant_prob": self.consent_grant_prob}


@dataclass(frozen=True)
class RegistrationEvent:
    origin: str
    consent: bool = False


@dataclass(frozen=True)
class UptimeEvent:
    uptime_ms: float


def _whitelisted(origin: str, whitelist: frozenset[str]) -> bool:
    if origin in whitelist:
        return True
    host = urlsplit(origin).hostname if "://" in origin else origin
    return host in whitelist


def enforce_policy(p: PolicyConfig, event: RegistrationEvent | UptimeEvent) -> Decision:
    if isinstance(event, RegistrationEvent):
        if p.whitelist and not _whitelisted(event.origin, p.whitelist):
            return Decision(False, DenyReason.NOT_WHITELISTED)
        if p.click_to_activate and not event.consent:
            return Decision(False, DenyReason.NO_CONSENT)
        return ALLOW
    if isinstance(event, UptimeEvent):
        if p.sw_time_cap_ms is not None and event.uptime_ms > p.sw_time_cap_ms:
            return Decision(False, DenyReason.TIME_CAP)
        return ALLOW
    raise TypeError(f"unsupported policy event {type(event).__name__}")


def sample_consent(p: PolicyConfig, rng: random.Random) -> bool:
    return rng.random() < p.consent_grant_prob


# -- log pipeline --------------------------------------------------------------


def traces_from_log(records: Iterable[Mapping[str, Any]]) -> dict[str, list[TraceMessage]]:
    """Group heartbeat records of a puppeteer JSONL log by servant."""
    traces: dict[str, list[TraceMessage]] = {}
    for r in records:
        if r.get("event") != "heartbeat":
            continue
        traces.setdefault(str(r["servant_id"]), []).append(TraceMessage(float(r["t_ms"]), int(r.get("size", 0))))
    for trace in traces.values():
        trace.sort(key=lambda m: m.t_ms)
    return dict(sorted(traces.items()))


@dataclass(frozen=True)
class TraceVerdict:
    trace_id: str
    flagged: bool
    score: float
    features: FlowFeatures

    def to_dict(self) -> dict[str, Any]:
        return {"trace_id": self.trace_id, "flagged": self.flagged, "score": self.score,
                "features": self.features.to_dict()}


def analyze_log(records: Iterable[Mapping[str, Any]], cv_threshold: float = DEFAULT_CV_THRESHOLD,
                min_count: int = DEFAULT_MIN_COUNT) -> list[TraceVerdict]:
    traces = traces_from_log(records)
    if not traces:
        raise EmptyTrace("log contains no heartbeat traffic")
    out = []
    for trace_id, trace in traces.items():
        f = extract_features(trace)
        v = detect_beacon(f, cv_threshold, min_count)
        out.append(TraceVerdict(trace_id, v.flagged, v.score, f))
    return out


def write_verdicts(verdicts: Iterable[TraceVerdict], stream: IO[str]) -> None:
    for v in verdicts:
        stream.write(json.dumps(v.to_dict(), sort_keys=True) + "\n")


# -- simulated heartbeat sessions ------------------------------------------------


@dataclass
class SessionConfig:
    heartbeats: int = 200
    interval_ms: int = 30_000
    jitter: float = 0.0
    seed: int = 0
    servant_id: str = "servant-0"
    device_id: str = "i7-4790"
    start_s: float = 1_000_000.0


def simulate_session(cfg: SessionConfig) -> list[dict[str, Any]]:
    """Drive a servant and a puppeteer on a virtual clock.

    Heartbeats are generated by the real :class:`Servant` and ingested by
    the real :class:`Puppeteer`, so the returned records have exactly the
    shape of a live puppeteer log.
    """
    if not (0.0 <= cfg.jitter < 1.0):
        raise ConfigError("jitter must be in [0, 1)")
    rng = random.Random(cfg.seed)
    clock = [cfg.start_s]
    log = EventLog()
    p = Puppeteer(heartbeat_interval_ms=cfg.interval_ms, log_=log)
    device = load_calibration().device(cfg.device_id)
    s = Servant(cfg.servant_id, device, clock=lambda: clock[0], utilization_model=lambda _s: 0.0)
    reg = s.register_message()
    s.on_message(p.register(reg, clock[0], len(encode(reg))))
    for _ in range(cfg.heartbeats):
        step = cfg.interval_ms * (1.0 + (rng.uniform(-cfg.jitter, cfg.jitter) if cfg.jitter else 0.0))
        clock[0] += step / 1000.0
        hb = s.make_heartbeat()
        t = p.heartbeat(hb, clock[0], len(encode(hb)))
        if t is not None:
            s.apply_throttle(t)
    return log.records
