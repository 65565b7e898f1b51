"""Calibration data model and the deterministic rate functions built on it.

Measured figures (hash rates, request rates, browser scale factors) live in a
JSON table rather than in code; see ``data/default_calibration.json``.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

# Power Saver clocks the CPU down by up to 78.41% relative to High Performance.
POWER_SAVER_FACTOR = 1.0 - 0.7841
# Balanced mode runs at full clock only above this utilization.
BALANCED_FULL_SPEED_ABOVE = 0.5

DEFAULT_CALIBRATION = "default_calibration.json"


class DomainError(ValueError):
    """An argument lies outside the domain of a rate function."""


class CalibrationMissing(LookupError):
    """The table has no entry for the requested combination."""


class CalibrationError(ValueError):
    """A calibration file failed to parse or validate.

    ``path`` is the dotted field path of the offending value.
    """

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class PowerMode(str, enum.Enum):
    HIGH_PERFORMANCE = "HighPerformance"
    BALANCED = "Balanced"
    POWER_SAVER = "PowerSaver"


class NetworkKind(str, enum.Enum):
    GBE = "GbE"
    GOOD_3G = "Good3G"
    CUSTOM = "Custom"


@dataclass(frozen=True)
class BatteryStatus:
    charging: bool = True
    level: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.level <= 1.0):
            raise DomainError(f"battery level {self.level!r} not in [0, 1]")

    def to_dict(self) -> dict[str, Any]:
        return {"charging": self.charging, "level": self.level}


@dataclass(frozen=True)
class DeviceProfile:
    id: str
    cores: int
    base_hashrate: float
    power_mode: PowerMode = PowerMode.HIGH_PERFORMANCE
    battery: BatteryStatus = field(default_factory=BatteryStatus)

    def __post_init__(self):
        if self.cores < 1:
            raise DomainError(f"device {self.id!r}: cores must be >= 1")
        if not self.base_hashrate > 0:
            raise DomainError(f"device {self.id!r}: base_hashrate must be > 0")


@dataclass(frozen=True)
class BrowserProfile:
    name: str
    hash_scale: float = 1.0
    req_rate: Mapping[NetworkKind, float] = field(default_factory=dict)
    sw_supported: bool = True
    push_supported: bool = True

    def __post_init__(self):
        if not self.hash_scale > 0:
            raise DomainError(f"browser {self.name!r}: hash_scale must be > 0")
        for kind, rate in self.req_rate.items():
            if not rate >= 0:
                raise DomainError(f"browser {self.name!r}: req_rate[{kind.value}] < 0")


@dataclass(frozen=True)
class NetworkProfile:
    kind: NetworkKind
    nominal_rate: float = 0.0
    latency: float = 0.0

    def __post_init__(self):
        if not self.nominal_rate >= 0:
            raise DomainError("nominal_rate must be >= 0")
        if not self.latency >= 0:
            raise DomainError("latency must be >= 0")


@dataclass(frozen=True)
class CalibrationTable:
    devices: tuple[DeviceProfile, ...]
    browsers: tuple[BrowserProfile, ...]
    networks: tuple[NetworkProfile, ...]

    def device(self, device_id: str) -> DeviceProfile:
        for d in self.devices:
            if d.id == device_id:
                return d
        raise CalibrationMissing(f"no device {device_id!r}")

    def browser(self, name: str) -> BrowserProfile:
        for b in self.browsers:
            if b.name == name:
                return b
        raise CalibrationMissing(f"no browser {name!r}")

    def network(self, kind: NetworkKind | str) -> NetworkProfile:
        kind = NetworkKind(kind)
        for n in self.networks:
            if n.kind is kind:
                return n
        raise CalibrationMissing(f"no network {kind.value!r}")


def power_factor(mode: PowerMode, utilization: float) -> float:
    if not (0.0 <= utilization <= 1.0):
        raise DomainError(f"utilization {utilization!r} not in [0, 1]")
    mode = PowerMode(mode)
    if mode is PowerMode.HIGH_PERFORMANCE:
        return 1.0
    if mode is PowerMode.BALANCED and utilization > BALANCED_FULL_SPEED_ABOVE:
        return 1.0
    # Balanced at or below the threshold is treated like Power Saver.
    return POWER_SAVER_FACTOR


def effective_hashrate(
    device: DeviceProfile,
    browser: BrowserProfile,
    utilization: float,
    cores_used: int,
) -> float:
    """Hashes/second a servant obtains on ``device`` inside ``browser``.

    Utilization enters linearly; the power mode factor is applied on top.
    """
    if not (1 <= cores_used <= device.cores):
        raise DomainError(f"cores_used={cores_used} outside [1, {device.cores}]")
    factor = power_factor(device.power_mode, utilization)
    return device.base_hashrate * cores_used * utilization * browser.hash_scale * factor


def request_rate(browser: BrowserProfile, network: NetworkProfile) -> float:
    """Look up the outgoing request rate for a browser on a network.

    Custom networks without a browser-specific entry carry their own
    ``nominal_rate``.
    """
    try:
        return float(browser.req_rate[network.kind])
    except KeyError:
        if network.kind is NetworkKind.CUSTOM:
            return float(network.nominal_rate)
        raise CalibrationMissing(
            f"browser {browser.name!r} has no request rate for {network.kind.value}"
        ) from None


# -- loading -----------------------------------------------------------------


def _require(obj: Mapping[str, Any], key: str, path: str) -> Any:
    if not isinstance(obj, Mapping):
        raise CalibrationError(path, "expected an object")
    if key not in obj:
        raise CalibrationError(f"{path}.{key}", "missing field")
    return obj[key]


def _number(value: Any, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise CalibrationError(path, f"expected a finite number, got {value!r}")
    return float(value)


def _parse_device(raw: Any, path: str) -> DeviceProfile:
    cores = _require(raw, "cores", path)
    if isinstance(cores, bool) or not isinstance(cores, int):
        raise CalibrationError(f"{path}.cores", "expected an integer")
    battery_raw = raw.get("battery", {"charging": True, "level": 1.0})
    try:
        battery = BatteryStatus(
            charging=bool(_require(battery_raw, "charging", f"{path}.battery")),
            level=_number(_require(battery_raw, "level", f"{path}.battery"), f"{path}.battery.level"),
        )
        return DeviceProfile(
            id=str(_require(raw, "id", path)),
            cores=cores,
            base_hashrate=_number(_require(raw, "base_hashrate", path), f"{path}.base_hashrate"),
            power_mode=PowerMode(raw.get("power_mode", PowerMode.HIGH_PERFORMANCE.value)),
            battery=battery,
        )
    except CalibrationError:
        raise
    except ValueError as exc:
        raise CalibrationError(path, str(exc)) from exc


def _parse_browser(raw: Any, path: str) -> BrowserProfile:
    rates_raw = raw.get("req_rate", {}) if isinstance(raw, Mapping) else {}
    if not isinstance(rates_raw, Mapping):
        raise CalibrationError(f"{path}.req_rate", "expected an object")
    rates = {}
    for key, value in rates_raw.items():
        try:
            kind = NetworkKind(key)
        except ValueError:
            raise CalibrationError(f"{path}.req_rate.{key}", "unknown network kind") from None
        rates[kind] = _number(value, f"{path}.req_rate.{key}")
    try:
        return BrowserProfile(
            name=str(_require(raw, "name", path)),
            hash_scale=_number(raw.get("hash_scale", 1.0), f"{path}.hash_scale"),
            req_rate=rates,
            sw_supported=bool(raw.get("sw_supported", True)),
            push_supported=bool(raw.get("push_supported", True)),
        )
    except CalibrationError:
        raise
    except ValueError as exc:
        raise CalibrationError(path, str(exc)) from exc


def _parse_network(raw: Any, path: str) -> NetworkProfile:
    try:
        return NetworkProfile(
            kind=NetworkKind(_require(raw, "kind", path)),
            nominal_rate=_number(raw.get("nominal_rate", 0.0), f"{path}.nominal_rate"),
            latency=_number(raw.get("latency", 0.0), f"{path}.latency"),
        )
    except CalibrationError:
        raise
    except ValueError as exc:
        raise CalibrationError(path, str(exc)) from exc


def _check_unique(ids: list[str], path: str) -> None:
    seen = set()
    for i, ident in enumerate(ids):
        if ident in seen:
            raise CalibrationError(f"{path}[{i}]", f"duplicate id {ident!r}")
        seen.add(ident)


def parse_calibration(raw: Any) -> CalibrationTable:
    if not isinstance(raw, Mapping):
        raise CalibrationError("", "calibration must be a JSON object")
    devices_raw = raw.get("devices") or []
    if not devices_raw:
        raise CalibrationError("devices", "no devices")
    browsers_raw = raw.get("browsers") or []
    if not browsers_raw:
        raise CalibrationError("browsers", "no browsers")
    networks_raw = raw.get("networks") or []
    if not networks_raw:
        raise CalibrationError("networks", "no networks")
    for key, value in (("devices", devices_raw), ("browsers", browsers_raw), ("networks", networks_raw)):
        if not isinstance(value, list):
            raise CalibrationError(key, "expected a list")

    devices = tuple(_parse_device(d, f"devices[{i}]") for i, d in enumerate(devices_raw))
    browsers = tuple(_parse_browser(b, f"browsers[{i}]") for i, b in enumerate(browsers_raw))
    networks = tuple(_parse_network(n, f"networks[{i}]") for i, n in enumerate(networks_raw))
    _check_unique([d.id for d in devices], "devices")
    _check_unique([b.name for b in browsers], "browsers")
    _check_unique([n.kind.value for n in networks], "networks")
    return CalibrationTable(devices, browsers, networks)


def load_calibration(path: str | Path | None = None) -> CalibrationTable:
    """Load and validate a calibration table; ``None`` loads the bundled default."""
    if path is None:
        text = resources.files("puppetry.data").joinpath(DEFAULT_CALIBRATION).read_text("utf-8")
    else:
        try:
            text = Path(path).read_text("utf-8")
        except OSError as exc:
            raise CalibrationError("", f"{path}: {exc.strerror}") from None
    if not text.strip():
        raise CalibrationError("devices", "no devices")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CalibrationError("", f"invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return parse_calibration(raw)


def calibration_to_dict(table: CalibrationTable) -> dict[str, Any]:
    return {
        "devices": [
            {
                "id": d.id,
                "cores": d.cores,
                "base_hashrate": d.base_hashrate,
                "power_mode": d.power_mode.value,
                "battery": d.battery.to_dict(),
            }
            for d in table.devices
        ],
        "browsers": [
            {
                "name": b.name,
                "hash_scale": b.hash_scale,
                "req_rate": {k.value: v for k, v in b.req_rate.items()},
                "sw_supported": b.sw_supported,
                "push_supported": b.push_supported,
            }
            for b in table.browsers
        ],
        "networks": [
            {"kind": n.kind.value, "nominal_rate": n.nominal_rate, "latency": n.latency}
            for n in table.networks
        ],
    }
