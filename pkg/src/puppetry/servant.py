"""The in-browser agent modeled as an explicit state machine.

``step_lifecycle`` encodes how each worker kind reacts to page, tab and
browser events; :class:`Servant` wraps a state with heartbeat emission and
cooperative, intensity-capped task execution. :func:`run_servant` drives a
servant against a live puppeteer over TCP.
"""

from __future__ import annotations

import enum
import logging
import queue
import random
import socket
import threading
import time
from dataclasses import dataclass, replace
from typing import Callable

from .calibration import BatteryStatus, DeviceProfile
from .protocol import (
    Heartbeat,
    Message,
    ProtocolError,
    PushWake,
    Register,
    RegisterAck,
    ResultPayload,
    TaskAssign,
    TaskResult,
    Throttle,
    recv_message,
    send_message,
)
from .safety import default_gate, gate_from_env, set_default_gate
from .workloads import (
    WORK_QUANTUM,
    Flood,
    HashCrack,
    PoW,
    TaskSpec,
    UnsupportedTask,
    flood_run,
    hashcrack_search,
    pow_attempt,
)

log = logging.getLogger(__name__)


class WorkerKind(str, enum.Enum):
    DEDICATED = "DedicatedWebWorker"
    SHARED = "SharedWebWorker"
    SERVICE = "ServiceWorker"


class Phase(str, enum.Enum):
    UNREGISTERED = "Unregistered"
    REGISTERED = "Registered"
    ACTIVE = "Active"
    PAUSED = "Paused"
    TERMINATED = "Terminated"


class LifecycleEvent(str, enum.Enum):
    PAGE_VISIT = "PageVisit"
    TAB_CLOSED = "TabClosed"
    NAVIGATE_AWAY = "NavigateAway"
    ALL_TABS_CLOSED = "AllTabsClosed"
    BROWSER_CLOSED = "BrowserClosed"
    BROWSER_RESTARTED = "BrowserRestarted"
    SYNC_FIRE = "SyncFire"
    PUSH_WAKE = "PushWakeReceived"
    IFRAME_ACTIVATION = "IframeActivation"


class StateError(RuntimeError):
    """An operation was attempted in a phase that does not allow it."""


class ThrottleViolation(ValueError):
    """A throttle command carried an intensity outside [0, 1]."""


@dataclass(frozen=True)
class ServantState:
    kind: WorkerKind
    phase: Phase = Phase.UNREGISTERED
    attached_pages: int = 0
    sync_registered: bool = False
    push_granted: bool = False
    intensity: float = 1.0
    uptime_ms: float = 0.0
    throttled: bool = False
    browser_open: bool = True
    warning: str | None = None

    def __post_init__(self):
        if self.attached_pages < 0:
            raise ValueError("attached_pages must be >= 0")
        if not (0.0 <= self.intensity <= 1.0):
            raise ValueError("intensity must be in [0, 1]")
        if self.phase is Phase.ACTIVE and self.kind is not WorkerKind.SERVICE and self.attached_pages < 1:
            raise ValueError("an active web worker needs an attached page")

    @property
    def working(self) -> bool:
        return self.phase is Phase.ACTIVE and not self.throttled and self.intensity > 0


_ATTACH = (LifecycleEvent.PAGE_VISIT, LifecycleEvent.IFRAME_ACTIVATION)
_DETACH = (LifecycleEvent.TAB_CLOSED, LifecycleEvent.NAVIGATE_AWAY)


def _web_worker_step(s: ServantState, e: LifecycleEvent) -> ServantState:
    live = s.phase is Phase.ACTIVE
    if e in _ATTACH:
        if not live:
            return replace(s, phase=Phase.ACTIVE, attached_pages=1, browser_open=True)
        if s.kind is WorkerKind.SHARED:
            return replace(s, attached_pages=s.attached_pages + 1)
        # a dedicated worker belongs to exactly one page
        return s
    if not live:
        return s
    if e in _DETACH:
        pages = s.attached_pages - 1
        if s.kind is WorkerKind.DEDICATED or pages == 0:
            return replace(s, phase=Phase.TERMINATED, attached_pages=0)
        return replace(s, attached_pages=pages)
    if e in (LifecycleEvent.ALL_TABS_CLOSED, LifecycleEvent.BROWSER_CLOSED):
        return replace(s, phase=Phase.TERMINATED, attached_pages=0,
                       browser_open=e is not LifecycleEvent.BROWSER_CLOSED)
    # sync, push and restarts are service-worker features
    return s


def _service_worker_step(s: ServantState, e: LifecycleEvent) -> ServantState:
    if e in _ATTACH:
        return replace(s, phase=Phase.ACTIVE, attached_pages=s.attached_pages + 1, browser_open=True)
    if s.phase in (Phase.UNREGISTERED, Phase.REGISTERED):
        if e is LifecycleEvent.BROWSER_CLOSED:
            return replace(s, browser_open=False)
        if e is LifecycleEvent.BROWSER_RESTARTED:
            return replace(s, browser_open=True)
        return s

    if e in _DETACH or e is LifecycleEvent.ALL_TABS_CLOSED:
        pages = 0 if e is LifecycleEvent.ALL_TABS_CLOSED else max(0, s.attached_pages - 1)
        phase = s.phase
        if phase is Phase.ACTIVE and pages == 0 and not s.sync_registered:
            phase = Phase.PAUSED
        return replace(s, phase=phase, attached_pages=pages)
    if e is LifecycleEvent.BROWSER_CLOSED:
        return replace(s, phase=Phase.PAUSED, attached_pages=0, browser_open=False)
    if e is LifecycleEvent.BROWSER_RESTARTED:
        # stays paused until a push wake-up or a fresh visit/iframe
        return replace(s, browser_open=True)
    if e is LifecycleEvent.PUSH_WAKE:
        if s.phase is Phase.PAUSED and s.push_granted and s.browser_open:
            return replace(s, phase=Phase.ACTIVE)
        return s
    # SyncFire keeps an active, sync-registered worker alive; it does not revive one
    return s


def step_lifecycle(s: ServantState, e: LifecycleEvent) -> ServantState:
    """Apply one lifecycle event.

    Terminated is absorbing: events on a terminated servant are ignored and
    flagged in ``warning``. A later visit creates a new servant (see
    :func:`fresh_state`), not a resurrection of this one.
    """
    e = LifecycleEvent(e)
    if s.phase is Phase.TERMINATED:
        return replace(s, warning=f"ignored {e.value} on terminated servant")
    if s.warning is not None:
        s = replace(s, warning=None)
    if s.kind is WorkerKind.SERVICE:
        return _service_worker_step(s, e)
    return _web_worker_step(s, e)


def fresh_state(kind: WorkerKind, *, sync_registered: bool = False, push_granted: bool = False) -> ServantState:
    return ServantState(kind=WorkerKind(kind), sync_registered=sync_registered, push_granted=push_granted)


def terminate(s: ServantState) -> ServantState:
    return replace(s, phase=Phase.TERMINATED, attached_pages=0)


def accrue_uptime(s: ServantState, dt_ms: float) -> ServantState:
    if s.phase is Phase.ACTIVE and dt_ms > 0:
        return replace(s, uptime_ms=s.uptime_ms + dt_ms)
    return s


def apply_throttle(s: ServantState, t: Throttle) -> ServantState:
    if not (0.0 <= t.intensity <= 1.0):
        raise ThrottleViolation(f"throttle intensity {t.intensity!r} outside [0, 1]")
    return replace(s, intensity=t.intensity, throttled=t.pause)


# -- task execution ------------------------------------------------------------


@dataclass(frozen=True)
class SliceResult:
    progress: int
    cursor: int
    finding: str | int | None = None
    done: bool = False
    unsupported: bool = False


def task_start(task: TaskSpec) -> int:
    kind = task.kind
    if isinstance(kind, HashCrack):
        return kind.range.start_index
    if isinstance(kind, PoW):
        return kind.nonce_range.start_index
    return 0


def _run_chunk(task: TaskSpec, cursor: int, n: int) -> tuple[int, int, str | int | None, bool]:
    kind = task.kind
    if isinstance(kind, HashCrack):
        step = hashcrack_search(kind, cursor, n)
        done = step.finding is not None or step.cursor >= kind.range.end_index
        return step.cursor, step.examined, step.finding, done
    if isinstance(kind, PoW):
        step = pow_attempt(kind, cursor, n)
        done = step.nonce is not None or step.cursor >= kind.nonce_range.end_index
        return step.cursor, step.hashes_done, step.nonce, done
    raise UnsupportedTask(type(kind).__name__)


def execute_slice(
    task: TaskSpec,
    cursor: int,
    budget_ms: float,
    intensity: float,
    *,
    work_rate: float | None = None,
    clock: Callable[[], float] = time.perf_counter,
    sleep: Callable[[float], None] = time.sleep,
) -> SliceResult:
    """Advance ``task`` from ``cursor`` for one time slice.

    With ``work_rate`` (candidates/second) the slice is accounted in
    simulated time: exactly ``floor(work_rate * budget * intensity)``
    candidates are examined and nothing sleeps. Without it the slice is
    wall-clock bounded: work for ``budget * intensity`` checking the clock
    every work quantum, then idle for the rest of the budget.
    """
    if not (0.0 <= intensity <= 1.0):
        raise ValueError("intensity must be in [0, 1]")
    intensity = min(intensity, task.intensity_cap)
    if not isinstance(task.kind, (HashCrack, PoW)):
        return SliceResult(0, cursor, unsupported=True)
    if intensity == 0 or budget_ms <= 0:
        return SliceResult(0, cursor)

    if work_rate is not None:
        quota = int(work_rate * budget_ms / 1000.0 * intensity)
        new_cursor, done_n, finding, done = _run_chunk(task, cursor, quota) if quota else (cursor, 0, None, False)
        return SliceResult(done_n, new_cursor, finding, done)

    t0 = clock()
    work_s = budget_ms * intensity / 1000.0
    progress = 0
    finding = None
    done = False
    while True:
        cursor, n, finding, done = _run_chunk(task, cursor, WORK_QUANTUM)
        progress += n
        if done or clock() - t0 >= work_s:
            break
    if not done and intensity < 1.0:
        idle = budget_ms / 1000.0 - (clock() - t0)
        if idle > 0:
            sleep(idle)
    return SliceResult(progress, cursor, finding, done)


# -- the servant actor ---------------------------------------------------------


class Servant:
    """One servant: lifecycle state, heartbeat counter and task cursors.

    Not thread-safe; a servant is owned by exactly one event loop.
    """

    def __init__(
        self,
        servant_id: str,
        device: DeviceProfile,
        *,
        kind: WorkerKind = WorkerKind.SERVICE,
        browser_name: str = "Chrome",
        origin: str = "https://servant.test",
        scope: str = "/",
        sync_registered: bool = True,
        push_granted: bool = False,
        clock: Callable[[], float] = time.time,
        utilization_model: Callable[[Servant], float] | None = None,
    ):
        self.servant_id = servant_id
        self.device = device
        self.battery = device.battery
        self.browser_name = browser_name
        self.origin = origin
        self.scope = scope
        self.clock = clock
        self.state = fresh_state(kind, sync_registered=sync_registered, push_granted=push_granted)
        self.heartbeat_interval_ms = 30_000
        self.utilization_model = utilization_model
        self.tasks: dict[str, TaskSpec] = {}
        self.cursors: dict[str, int] = {}
        self._seq = 0
        self._busy_s = 0.0
        self._window_start = time.perf_counter()

    # lifecycle
    def handle_event(self, e: LifecycleEvent) -> ServantState:
        self.state = step_lifecycle(self.state, e)
        return self.state

    def register_message(self) -> Register:
        if self.state.phase is Phase.UNREGISTERED:
            self.state = replace(self.state, phase=Phase.REGISTERED)
        return Register(self.servant_id, self.origin, self.scope, self.browser_name,
                        {"cores": self.device.cores, "device_id": self.device.id})

    def activate(self) -> None:
        """Registration acknowledged while the registering page is open."""
        self.handle_event(LifecycleEvent.PAGE_VISIT)

    # telemetry
    def utilization(self) -> float:
        if self.utilization_model is not None:
            return min(1.0, max(0.0, self.utilization_model(self)))
        now = time.perf_counter()
        window = now - self._window_start
        busy = self._busy_s
        self._busy_s, self._window_start = 0.0, now
        return min(1.0, busy / window) if window > 0 else 0.0

    def make_heartbeat(self) -> Heartbeat:
        if self.state.phase is not Phase.ACTIVE:
            raise StateError(f"heartbeat requires Active, servant is {self.state.phase.value}")
        self._seq += 1
        return Heartbeat(self.servant_id, self._seq, self.utilization(), self.battery,
                         int(self.clock() * 1000))

    # control
    def apply_throttle(self, t: Throttle) -> None:
        self.state = apply_throttle(self.state, t)

    def assign(self, task: TaskSpec) -> None:
        self.tasks.setdefault(task.task_id, task)
        self.cursors.setdefault(task.task_id, task_start(task))

    def on_message(self, m: Message) -> list[Message]:
        """React to an inbound message; returns messages to send back."""
        if isinstance(m, RegisterAck):
            self.heartbeat_interval_ms = m.heartbeat_interval_ms
            if self.state.phase is not Phase.ACTIVE:
                self.activate()
        elif isinstance(m, TaskAssign):
            self.assign(m.task)
        elif isinstance(m, Throttle):
            try:
                self.apply_throttle(m)
            except ThrottleViolation as exc:
                return [ProtocolError("BadThrottle", str(exc))]
        elif isinstance(m, PushWake):
            self.handle_event(LifecycleEvent.PUSH_WAKE)
        elif isinstance(m, ProtocolError):
            log.warning("%s: puppeteer reported %s: %s", self.servant_id, m.code, m.detail)
        return []

    @property
    def has_work(self) -> bool:
        return bool(self.tasks)

    def execute_slice(self, task: TaskSpec, budget_ms: float, *, work_rate: float | None = None) -> SliceResult:
        if self.state.phase is not Phase.ACTIVE:
            raise StateError(f"cannot execute while {self.state.phase.value}")
        intensity = 0.0 if self.state.throttled else self.state.intensity
        cursor = self.cursors.setdefault(task.task_id, task_start(task))
        t0 = time.perf_counter()
        result = execute_slice(task, cursor, budget_ms, intensity, work_rate=work_rate)
        if intensity > 0:
            self._busy_s += min(time.perf_counter() - t0, budget_ms * intensity / 1000.0)
        self.cursors[task.task_id] = result.cursor
        return result

    def step_work(self, budget_ms: float, *, work_rate: float | None = None) -> list[TaskResult]:
        """Run one slice of the oldest task; report it if it finished."""
        if not self.tasks or not self.state.working:
            return []
        task_id, task = next(iter(self.tasks.items()))
        if isinstance(task.kind, Flood):
            del self.tasks[task_id]
            stats = flood_run(task.kind)
            return [TaskResult(task_id, ResultPayload("stats", None, stats.attempted, stats.to_dict()))]
        result = self.execute_slice(task, budget_ms, work_rate=work_rate)
        if result.unsupported:
            del self.tasks[task_id]
            return [TaskResult(task_id, ResultPayload("unsupported", detail={"kind": type(task.kind).__name__}))]
        if not result.done:
            return []
        del self.tasks[task_id]
        start = task_start(task)
        work = result.cursor - start
        if result.finding is not None:
            return [TaskResult(task_id, ResultPayload("found", str(result.finding), work))]
        return [TaskResult(task_id, ResultPayload("exhausted", None, work))]


# -- live mode -----------------------------------------------------------------


@dataclass
class LiveOptions:
    heartbeat_jitter: float = 0.0
    slice_ms: float = 5.0
    min_heartbeats: int = 0
    seed: int | None = None
    connect_timeout_s: float = 10.0


def run_servant(host: str, port: int, servant: Servant, options: LiveOptions | None = None,
                stop: threading.Event | None = None) -> dict:
    """Connect to a puppeteer and serve until the connection closes.

    Returns a summary with heartbeat count and work done. When
    ``min_heartbeats`` is set the servant also leaves on its own once that
    many heartbeats have been sent and it has no runnable work left.
    """
    opts = options or LiveOptions()
    stop = stop or threading.Event()
    rng = random.Random(opts.seed)
    default_gate().check(host, port)
    sock = socket.create_connection((host, port), timeout=opts.connect_timeout_s)
    sock.settimeout(None)
    inbox: queue.Queue = queue.Queue()

    def reader() -> None:
        try:
            while True:
                inbox.put(recv_message(sock))
        except Exception as exc:  # connection closed or corrupt stream
            inbox.put(exc)

    threading.Thread(target=reader, name=f"{servant.servant_id}-reader", daemon=True).start()
    send_message(sock, servant.register_message())

    heartbeats = 0
    work_done = 0
    closed = False

    def handle(m) -> None:
        nonlocal closed
        if isinstance(m, Exception):
            closed = True
            return
        for reply in servant.on_message(m):
            send_message(sock, reply)

    while servant.state.phase is not Phase.ACTIVE and not closed:
        handle(inbox.get(timeout=opts.connect_timeout_s))

    def next_delay() -> float:
        jitter = rng.uniform(-opts.heartbeat_jitter, opts.heartbeat_jitter) if opts.heartbeat_jitter else 0.0
        return servant.heartbeat_interval_ms * (1.0 + jitter) / 1000.0

    next_hb = time.monotonic() + next_delay()
    try:
        while not closed and not stop.is_set():
            now = time.monotonic()
            if now >= next_hb:
                send_message(sock, servant.make_heartbeat())
                heartbeats += 1
                next_hb += next_delay()
                idle = not (servant.has_work and servant.state.working)
                if opts.min_heartbeats and heartbeats >= opts.min_heartbeats and idle:
                    break
                continue
            try:
                while True:
                    handle(inbox.get_nowait())
            except queue.Empty:
                pass
            if servant.has_work and servant.state.working:
                budget = min(opts.slice_ms, max(0.5, (next_hb - now) * 1000.0))
                for result in servant.step_work(budget):
                    work_done += result.payload.work_done
                    send_message(sock, result)
            else:
                try:
                    handle(inbox.get(timeout=max(0.0, next_hb - time.monotonic())))
                except queue.Empty:
                    pass
    finally:
        try:
            sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        sock.close()
    return {"servant_id": servant.servant_id, "heartbeats": heartbeats, "work_done": work_done}


def servant_process_main(host: str, port: int, servant_id: str, device: DeviceProfile,
                         options: LiveOptions, result_queue=None) -> None:
    """Entry point for a servant running in its own process."""
    set_default_gate(gate_from_env())
    servant = Servant(servant_id, device, scope=f"/{servant_id}/")
    summary = run_servant(host, port, servant, options)
    if result_queue is not None:
        result_queue.put(summary)


__all__ = [
    "BatteryStatus",
    "LifecycleEvent",
    "LiveOptions",
    "Phase",
    "Servant",
    "ServantState",
    "SliceResult",
    "StateError",
    "WorkerKind",
    "apply_throttle",
    "execute_slice",
    "fresh_state",
    "run_servant",
    "step_lifecycle",
    "terminate",
]
