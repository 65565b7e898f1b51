"""Seeded discrete-event simulation of an infected browser population.

Each simulated user opens the infecting page at t=0 and then follows a
sampled schedule of tab closes, browser restarts, push grants and iframe
re-activations. Worker state is advanced with :func:`step_lifecycle`; work
is accrued in closed form (rate x time spent Active), so a 12 h run over
10 000 users is a few hundred thousand heap operations and no hashing.
"""

from __future__ import annotations

import enum
import heapq
import json
import math
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Mapping

from .calibration import CalibrationTable, effective_hashrate, load_calibration, request_rate
from .defense import DenyReason, PolicyConfig, RegistrationEvent, enforce_policy
from .servant import (
    LifecycleEvent,
    Phase,
    ServantState,
    WorkerKind,
    accrue_uptime,
    fresh_state,
    step_lifecycle,
    terminate,
)

DISTRIBUTION_KINDS = ("exponential", "lognormal", "constant", "uniform", "infinite")
INFECTION_ORIGIN = "https://distributor.test"


class ConfigError(ValueError):
    pass


class Baseline(str, enum.Enum):
    MARIONET = "MarioNet"
    WEB_WORKER = "WebWorkerBotnet"


@dataclass(frozen=True)
class Dist:
    """A duration distribution in seconds.

    exponential(mean), lognormal(median, sigma), constant(value),
    uniform(low, high) or infinite.
    """

    kind: str
    mean: float | None = None
    median: float | None = None
    sigma: float | None = None
    value: float | None = None
    low: float | None = None
    high: float | None = None

    def __post_init__(self):
        need = {
            "exponential": ("mean",),
            "lognormal": ("median", "sigma"),
            "constant": ("value",),
            "uniform": ("low", "high"),
            "infinite": (),
        }.get(self.kind)
        if need is None:
            raise ConfigError(f"unknown distribution {self.kind!r}; expected one of {DISTRIBUTION_KINDS}")
        for name in need:
            v = getattr(self, name)
            if v is None or not math.isfinite(v):
                raise ConfigError(f"{self.kind}: parameter {name!r} must be a finite number")
        if self.kind == "exponential" and self.mean <= 0:
            raise ConfigError("exponential: mean must be > 0")
        if self.kind == "lognormal" and (self.median <= 0 or self.sigma < 0):
            raise ConfigError("lognormal: median must be > 0 and sigma >= 0")
        if self.kind == "constant" and self.value < 0:
            raise ConfigError("constant: value must be >= 0")
        if self.kind == "uniform" and not (0 <= self.low <= self.high):
            raise ConfigError("uniform: need 0 <= low <= high")

    def sample(self, rng: random.Random) -> float:
        if self.kind == "exponential":
            return rng.expovariate(1.0 / self.mean)
        if self.kind == "lognormal":
            return rng.lognormvariate(math.log(self.median), self.sigma)
        if self.kind == "constant":
            return self.value
        if self.kind == "uniform":
            return rng.uniform(self.low, self.high)
        return math.inf

    @property
    def expected(self) -> float:
        if self.kind == "exponential":
            return self.mean
        if self.kind == "lognormal":
            return self.median * math.exp(self.sigma ** 2 / 2.0)
        if self.kind == "constant":
            return self.value
        if self.kind == "uniform":
            return (self.low + self.high) / 2.0
        return math.inf

    def to_dict(self) -> dict[str, Any]:
        return {k: v for k, v in ((f.name, getattr(self, f.name)) for f in fields(self)) if v is not None}

    @classmethod
    def from_dict(cls, raw: Any) -> Dist:
        if isinstance(raw, Dist):
            return raw
        if not isinstance(raw, Mapping) or "kind" not in raw:
            raise ConfigError(f"distribution must be an object with 'kind', got {raw!r}")
        known = {f.name for f in fields(cls)}
        extra = set(raw) - known
        if extra:
            raise ConfigError(f"unknown distribution parameters {sorted(extra)}")
        return cls(**raw)


@dataclass(frozen=True)
class BaselineModel:
    cores_used: int = 8
    per_core_rate: float = 1.0

    def __post_init__(self):
        if self.cores_used < 1:
            raise ConfigError("cores_used must be >= 1")


def crossover_time(marionet_effective_cores: float, baseline: BaselineModel, visit_s: float) -> float:
    """Time at which a persistent worker's output equals one full baseline visit."""
    if marionet_effective_cores <= 0:
        raise ConfigError("marionet_effective_cores must be > 0")
    return baseline.cores_used * visit_s / marionet_effective_cores


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    population: int = 10_000
    visit_duration: Dist = Dist("exponential", mean=60.0)
    browser_uptime: Dist = Dist("lognormal", median=4 * 3600.0, sigma=1.0)
    browser_downtime: Dist = Dist("exponential", mean=8 * 3600.0)
    push_grant_prob: float = 0.12
    iframe_activation_rate: float = 0.0  # per hour of browser uptime
    duration_s: float = 12 * 3600.0
    baseline: Baseline = Baseline.MARIONET
    effective_cores: float = 0.4444
    baseline_cores: int = 8
    intensity: float = 1.0
    device: str = "desktop-8core-sha256"
    browser: str = "Chrome"
    network: str = "Good3G"
    flood_fraction: float = 0.0
    sample_interval_s: float = 10.0
    policy: PolicyConfig | None = None
    calibration_path: str | None = None

    def __post_init__(self):
        try:
            object.__setattr__(self, "baseline", Baseline(self.baseline))
        except ValueError:
            raise ConfigError(f"baseline must be one of {[b.value for b in Baseline]}") from None
        for name in ("visit_duration", "browser_uptime", "browser_downtime"):
            object.__setattr__(self, name, Dist.from_dict(getattr(self, name)))
        if isinstance(self.policy, Mapping):
            object.__setattr__(self, "policy", _policy_from_dict(self.policy))
        if self.population < 1:
            raise ConfigError("population must be >= 1")
        for name in ("push_grant_prob", "flood_fraction", "intensity"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"{name} must be in [0, 1]")
        if self.iframe_activation_rate < 0:
            raise ConfigError("iframe_activation_rate must be >= 0")
        if not (self.duration_s > 0 and math.isfinite(self.duration_s)):
            raise ConfigError("duration_s must be a positive finite number")
        if self.sample_interval_s <= 0:
            raise ConfigError("sample_interval_s must be > 0")
        if self.effective_cores <= 0:
            raise ConfigError("effective_cores must be > 0")
        if self.baseline_cores < 1:
            raise ConfigError("baseline_cores must be >= 1")

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Dist):
                v = v.to_dict()
            elif isinstance(v, PolicyConfig):
                v = v.to_dict()
            elif isinstance(v, enum.Enum):
                v = v.value
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> SimConfig:
        if not isinstance(raw, Mapping):
            raise ConfigError("simulation config must be an object")
        known = {f.name for f in fields(cls)}
        extra = set(raw) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def _policy_from_dict(raw: Mapping[str, Any]) -> PolicyConfig:
    try:
        return PolicyConfig(**{**raw, "whitelist": frozenset(raw.get("whitelist", ()))})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"policy: {exc}") from None


def load_sim_config(path: str | Path | None, **overrides: Any) -> SimConfig:
    raw: dict[str, Any] = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: expected a JSON object")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    return SimConfig.from_dict(raw)


# -- population ----------------------------------------------------------------


@dataclass
class UserSchedule:
    user: int
    visit_s: float
    push_granted: bool
    consent: bool
    flood: bool
    sessions: list[tuple[float, float]] = field(default_factory=list)  # browser (open, close)
    iframes: list[tuple[float, float]] = field(default_factory=list)  # (activation, page closed)


def _poisson_times(rng: random.Random, rate_per_s: float, start: float, end: float) -> list[float]:
    out = []
    if rate_per_s <= 0:
        return out
    t = start
    while True:
        t += rng.expovariate(rate_per_s)
        if t >= end:
            return out
        out.append(t)


def sample_population(cfg: SimConfig, rng: random.Random) -> list[UserSchedule]:
    """Draw every user's schedule. The draw order per user is fixed so the
    same seed yields the same population regardless of the model run on it."""
    users = []
    iframe_rate = cfg.iframe_activation_rate / 3600.0
    policy = cfg.policy
    consent_p = policy.consent_grant_prob if policy is not None else 0.0
    for i in range(cfg.population):
        visit = cfg.visit_duration.sample(rng)
        push = rng.random() < cfg.push_grant_prob
        consent = rng.random() < consent_p
        flood = rng.random() < cfg.flood_fraction
        u = UserSchedule(i, visit, push, consent, flood)
        start = 0.0
        while start <= cfg.duration_s:
            close = start + cfg.browser_uptime.sample(rng)
            u.sessions.append((start, close))
            for t in _poisson_times(rng, iframe_rate, start, min(close, cfg.duration_s)):
                u.iframes.append((t, t + cfg.visit_duration.sample(rng)))
            if close > cfg.duration_s:
                break
            start = close + cfg.browser_downtime.sample(rng)
        users.append(u)
    return users


# -- simulation ----------------------------------------------------------------

TIME_CAP = "TimeCap"


@dataclass
class SimReport:
    config: dict[str, Any]
    times: list[float]
    active: list[int]
    cum_hashes: list[float]
    cum_requests: list[float]
    infections: int
    reactivations_by_push: int
    reactivations_by_iframe: int
    terminations_by_cap: int
    registrations_denied: int
    hash_rate: float
    request_rate: float
    active_seconds: list[float]
    events: list[dict[str, Any]]

    def to_csv(self) -> str:
        rows = ["t_s,active,cum_hashes,cum_requests"]
        for t, a, h, r in zip(self.times, self.active, self.cum_hashes, self.cum_requests):
            rows.append(f"{t!r},{a},{h!r},{r!r}")
        return "\n".join(rows) + "\n"

    def events_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.events)

    def summary(self) -> dict[str, Any]:
        return {
            "config": self.config,
            "infections": self.infections,
            "reactivations_by_push": self.reactivations_by_push,
            "reactivations_by_iframe": self.reactivations_by_iframe,
            "terminations_by_cap": self.terminations_by_cap,
            "registrations_denied": self.registrations_denied,
            "hash_rate": self.hash_rate,
            "request_rate": self.request_rate,
            "final_cum_hashes": self.cum_hashes[-1],
            "final_cum_requests": self.cum_requests[-1],
            "max_active_seconds": max(self.active_seconds, default=0.0),
        }


def _rates(cfg: SimConfig, table: CalibrationTable) -> tuple[WorkerKind, float, float]:
    device = table.device(cfg.device)
    browser = table.browser(cfg.browser)
    per_core = effective_hashrate(device, browser, 1.0, 1)
    if cfg.baseline is Baseline.MARIONET:
        kind, hashes = WorkerKind.SERVICE, per_core * cfg.effective_cores * cfg.intensity
    else:
        kind, hashes = WorkerKind.DEDICATED, per_core * cfg.baseline_cores
    requests = request_rate(browser, table.network(cfg.network)) if cfg.flood_fraction > 0 else 0.0
    return kind, hashes, requests


def run_simulation(cfg: SimConfig, table: CalibrationTable | None = None) -> SimReport:
    table = table or load_calibration(cfg.calibration_path)
    kind, hash_rate, req_rate = _rates(cfg, table)
    rng = random.Random(cfg.seed)
    users = sample_population(cfg, rng)
    horizon = cfg.duration_s
    policy = cfg.policy
    governed = kind is WorkerKind.SERVICE and policy is not None
    cap_s = policy.sw_time_cap_ms / 1000.0 if governed and policy.sw_time_cap_ms is not None else None

    heap: list[tuple[float, int, int, str, int]] = []
    seq = 0

    def push(t: float, user: int, event: str, token: int = 0) -> None:
        nonlocal seq
        if t <= horizon:
            heapq.heappush(heap, (t, seq, user, event, token))
            seq += 1

    states: dict[int, ServantState] = {}
    denied = 0
    events_log: list[dict[str, Any]] = []
    for u in users:
        if governed and not enforce_policy(policy, RegistrationEvent(INFECTION_ORIGIN, u.consent)):
            denied += 1
            continue
        states[u.user] = fresh_state(kind, sync_registered=True, push_granted=u.push_granted)
        first_close = u.sessions[0][1]
        push(0.0, u.user, LifecycleEvent.PAGE_VISIT.value)
        if u.visit_s < first_close:
            push(u.visit_s, u.user, LifecycleEvent.TAB_CLOSED.value)
        for k, (_, close) in enumerate(u.sessions):
            push(close, u.user, LifecycleEvent.BROWSER_CLOSED.value)
            if k + 1 < len(u.sessions):
                reopen = u.sessions[k + 1][0]
                push(reopen, u.user, LifecycleEvent.BROWSER_RESTARTED.value)
                if u.push_granted:
                    push(reopen, u.user, LifecycleEvent.PUSH_WAKE.value)
        for t_on, t_off in u.iframes:
            push(t_on, u.user, LifecycleEvent.IFRAME_ACTIVATION.value)
            session_close = next(c for o, c in u.sessions if o <= t_on < c)
            if t_off < session_close:
                push(t_off, u.user, LifecycleEvent.TAB_CLOSED.value)

    flood_users = {u.user for u in users if u.flood}
    active_since: dict[int, float] = {}
    active_total = [0.0] * cfg.population
    cap_token = [0] * cfg.population
    n_hash = n_req = 0
    cum_h = cum_r = 0.0
    t_last = 0.0
    infections = by_push = by_iframe = by_cap = 0

    times: list[float] = []
    active: list[int] = []
    cum_hashes: list[float] = []
    cum_requests: list[float] = []
    n_samples = int(math.floor(horizon / cfg.sample_interval_s + 1e-9)) + 1
    next_sample = 0

    def sample_until(t: float, inclusive: bool) -> None:
        nonlocal next_sample
        while next_sample < n_samples:
            ts = next_sample * cfg.sample_interval_s
            if ts > t or (ts == t and not inclusive):
                return
            times.append(ts)
            active.append(n_hash + n_req)
            cum_hashes.append(cum_h + n_hash * hash_rate * (ts - t_last))
            cum_requests.append(cum_r + n_req * req_rate * (ts - t_last))
            next_sample += 1

    while heap:
        t, _, user, event, token = heapq.heappop(heap)
        if t < t_last:
            raise AssertionError("virtual clock moved backwards")
        sample_until(t, inclusive=False)
        cum_h += n_hash * hash_rate * (t - t_last)
        cum_r += n_req * req_rate * (t - t_last)
        t_last = t

        before = states[user]
        if event == TIME_CAP:
            if token != cap_token[user] or before.phase is not Phase.ACTIVE:
                continue
            after = terminate(before)
        else:
            after = step_lifecycle(before, LifecycleEvent(event))
        was, now_active = before.phase is Phase.ACTIVE, after.phase is Phase.ACTIVE
        if was and not now_active:
            dt = t - active_since.pop(user)
            active_total[user] += dt
            after = replace(after, uptime_ms=accrue_uptime(before, dt * 1000.0).uptime_ms)
            if user in flood_users:
                n_req -= 1
            else:
                n_hash -= 1
            cap_token[user] += 1
            if event == TIME_CAP:
                by_cap += 1
        elif now_active and not was:
            active_since[user] = t
            if user in flood_users:
                n_req += 1
            else:
                n_hash += 1
            if before.phase is Phase.UNREGISTERED:
                infections += 1
            elif before.phase is Phase.PAUSED:
                if event == LifecycleEvent.PUSH_WAKE.value:
                    by_push += 1
                elif event == LifecycleEvent.IFRAME_ACTIVATION.value:
                    by_iframe += 1
            if cap_s is not None:
                cap_token[user] += 1
                push(t + max(0.0, cap_s - active_total[user]), user, TIME_CAP, cap_token[user])
        states[user] = after
        if after.phase is not before.phase or event == TIME_CAP:
            rec = {"t_s": t, "servant": user, "event": event, "from": before.phase.value, "to": after.phase.value}
            if event == TIME_CAP:
                rec["reason"] = DenyReason.TIME_CAP.value
            events_log.append(rec)

    sample_until(horizon, inclusive=True)
    cum_h += n_hash * hash_rate * (horizon - t_last)
    cum_r += n_req * req_rate * (horizon - t_last)
    for user, since in active_since.items():
        active_total[user] += horizon - since

    return SimReport(
        config=cfg.to_dict(),
        times=times,
        active=active,
        cum_hashes=cum_hashes,
        cum_requests=cum_requests,
        infections=infections,
        reactivations_by_push=by_push,
        reactivations_by_iframe=by_iframe,
        terminations_by_cap=by_cap,
        registrations_denied=denied,
        hash_rate=hash_rate,
        request_rate=req_rate,
        active_seconds=active_total,
        events=events_log,
    )


def empirical_crossover(marionet: SimReport, baseline: SimReport) -> float | None:
    """First time after t=0 at which MarioNet's cumulative work reaches the
    baseline's, linearly interpolated between samples."""
    if marionet.times != baseline.times:
        raise ValueError("reports are sampled on different grids")
    prev = None
    for t, m, b in zip(marionet.times, marionet.cum_hashes, baseline.cum_hashes):
        d = m - b
        if t > 0 and d >= 0 and prev is not None and prev[1] < 0:
            t0, d0 = prev
            return t0 + (t - t0) * (-d0) / (d - d0)
        if t > 0:
            prev = (t, d)
    return None


def run_pair(cfg: SimConfig, table: CalibrationTable | None = None) -> tuple[SimReport, SimReport]:
    """Run the same population under MarioNet and the web-worker baseline."""
    table = table or load_calibration(cfg.calibration_path)
    m = run_simulation(replace(cfg, baseline=Baseline.MARIONET), table)
    b = run_simulation(replace(cfg, baseline=Baseline.WEB_WORKER), table)
    return m, b


def sweep(cfgs: Iterable[SimConfig], workers: int = 4) -> list[SimReport]:
    """Independent runs share nothing, so they can go to a thread pool."""
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_simulation, cfgs))


def write_report(report: SimReport, out_dir: str | Path, name: str) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out / f"{name}.csv", "events": out / f"{name}.events.jsonl",
             "summary": out / f"{name}.summary.json"}
    paths["csv"].write_text(report.to_csv(), encoding="utf-8")
    paths["events"].write_text(report.events_jsonl(), encoding="utf-8")
    paths["summary"].write_text(json.dumps(report.summary(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return paths


def gnuplot_script(marionet_csv: str, baseline_csv: str, png: str = "crossover.png",
                   crossover_s: float | None = None) -> str:
    lines = [
        "set datafile separator ','",
        "set key top left",
        "set xlabel 'virtual time (s)'",
        "set ylabel 'cumulative hashes'",
        "set terminal pngcairo size 900,600",
        f"set output '{png}'",
    ]
    if crossover_s is not None:
        lines.append(f"set arrow from {crossover_s!r}, graph 0 to {crossover_s!r}, graph 1 nohead dt 2")
    lines.append(f"plot '{marionet_csv}' using 1:3 skip 1 with lines title 'MarioNet', \\")
    lines.append(f"     '{baseline_csv}' using 1:3 skip 1 with lines title 'web-worker baseline'")
    return "\n".join(lines) + "\n"
