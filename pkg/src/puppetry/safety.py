"""Loopback safety gate shared by every network-emitting component.

Nothing in this package opens a socket to a host that is not loopback or
explicitly allowlisted. Hostnames other than ``localhost`` are never
resolved, so a denied target produces no DNS traffic either.
"""

from __future__ import annotations

import ipaddress
import os
from dataclasses import dataclass, field

# Ports browsers refuse to fetch from (Fetch standard "bad ports").
RESERVED_PORTS = frozenset({
    0, 1, 7, 9, 11, 13, 15, 17, 19, 20, 21, 22, 23, 25, 37, 42, 43, 53, 69, 77,
    79, 87, 95, 101, 102, 103, 104, 109, 110, 111, 113, 115, 117, 119, 123, 135,
    137, 139, 143, 161, 179, 389, 427, 465, 512, 513, 514, 515, 526, 530, 531,
    532, 540, 548, 554, 556, 563, 587, 601, 636, 989, 990, 993, 995, 1719, 1720,
    1723, 2049, 3659, 4045, 5060, 5061, 6000, 6566, 6665, 6666, 6667, 6668, 6669,
    6697, 10080,
})


class SafetyRefusal(Exception):
    """Base class for refusals by the safety gate."""


class BlockedTarget(SafetyRefusal):
    pass


class BlockedPort(SafetyRefusal):
    pass


def is_loopback(host: str) -> bool:
    host = host.strip("[]")
    if host.lower() == "localhost":
        return True
    try:
        return ipaddress.ip_address(host).is_loopback
    except ValueError:
        return False


@dataclass(frozen=True)
class SafetyGate:
    allow_loopback: bool = True
    allowlist: frozenset[str] = field(default_factory=frozenset)

    def permits_host(self, host: str) -> bool:
        if host.strip("[]") in self.allowlist:
            return True
        return self.allow_loopback and is_loopback(host)

    def check(self, host: str, port: int) -> None:
        if not self.permits_host(host):
            raise BlockedTarget(f"target {host!r} is not loopback or allowlisted")
        if port in RESERVED_PORTS or not (0 < port < 65536):
            raise BlockedPort(f"port {port} is reserved")

    def check_bind(self, host: str) -> None:
        if not self.permits_host(host):
            raise BlockedTarget(f"refusing to bind non-loopback address {host!r}")


DENY_ALL = SafetyGate(allow_loopback=False)

_default_gate = SafetyGate()


def default_gate() -> SafetyGate:
    return _default_gate


def set_default_gate(gate: SafetyGate) -> SafetyGate:
    """Replace the process-wide gate; returns the previous one."""
    global _default_gate
    previous, _default_gate = _default_gate, gate
    return previous


NETWORK_ENV = "PUPPETRY_NETWORK"


def gate_from_env(environ=None) -> SafetyGate:
    """``PUPPETRY_NETWORK=deny`` selects :data:`DENY_ALL`; anything else the
    loopback-only default. Child processes inherit the setting."""
    environ = os.environ if environ is None else environ
    return DENY_ALL if environ.get(NETWORK_ENV, "").lower() == "deny" else SafetyGate()


def split_target(target: str) -> tuple[str, int, str]:
    """Parse ``host:port/path`` (path optional) into its parts."""
    hostport, sep, path = target.partition("/")
    path = "/" + path if sep else "/"
    if hostport.startswith("["):
        host, _, rest = hostport[1:].partition("]")
        port_s = rest.lstrip(":")
    else:
        host, _, port_s = hostport.rpartition(":")
    if not host or not port_s.isdigit():
        raise ValueError(f"target {target!r} is not host:port/path")
    return host, int(port_s), path
