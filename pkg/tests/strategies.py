"""Hypothesis strategies for protocol messages and task specs."""

from hypothesis import strategies as st

from puppetry.calibration import BatteryStatus
from puppetry.protocol import (
    Heartbeat,
    ProtocolError,
    PushWake,
    Register,
    RegisterAck,
    ResultPayload,
    TaskAssign,
    TaskResult,
    Throttle,
)
from puppetry.workloads import Flood, HashCrack, KeyRange, Opaque, PoW, TaskSpec

text = st.text(max_size=24)
ident = st.text(st.characters(min_codepoint=33, max_codepoint=0x2FF), min_size=1, max_size=16)
unit = st.floats(0.0, 1.0, allow_nan=False)
u32 = st.integers(0, 2**32)
scalar = st.one_of(st.none(), st.booleans(), st.integers(-(2**53), 2**53), text,
                   st.floats(allow_nan=False, allow_infinity=False))

batteries = st.builds(BatteryStatus, st.booleans(), unit)


@st.composite
def key_ranges(draw, limit=2**64):
    a = draw(st.integers(0, limit - 1))
    b = draw(st.integers(a + 1, limit))
    return KeyRange(a, b)


@st.composite
def hash_cracks(draw):
    alphabet = "".join(draw(st.lists(st.characters(min_codepoint=33, max_codepoint=126), min_size=1,
                                     max_size=8, unique=True)))
    length = draw(st.integers(1, 5))
    algo = draw(st.sampled_from(["MD5", "SHA256"]))
    digest = draw(st.binary(min_size=16, max_size=16) if algo == "MD5" else st.binary(min_size=32, max_size=32))
    return HashCrack(algo, digest, alphabet, length, draw(key_ranges(len(alphabet) ** length)))


pows = st.builds(PoW, st.binary(max_size=80), st.integers(0, 2**256), key_ranges())
floods = st.builds(
    Flood,
    st.sampled_from(["127.0.0.1:8088", "localhost:9000", "[::1]:8080"]),
    st.sampled_from(["/", "/x", "/a/b?c=1"]),
    st.sampled_from(["GET", "POST", "OPTIONS"]),
    st.integers(0, 10**6),
    st.integers(1, 1024),
    st.one_of(st.none(), st.floats(0.5, 1e5)),
    st.booleans(),
    st.integers(1, 60_000),
)
tasks = st.builds(TaskSpec, ident, st.one_of(hash_cracks(), pows, floods, st.builds(Opaque, text)), unit)

messages = st.one_of(
    st.builds(Register, ident, text, text, text, st.dictionaries(text, scalar, max_size=4)),
    st.builds(RegisterAck, ident, u32),
    st.builds(Heartbeat, ident, u32, unit, batteries, st.integers(0, 2**53)),
    st.builds(TaskAssign, tasks),
    st.builds(TaskResult, ident, st.builds(ResultPayload, st.sampled_from(["found", "exhausted", "stats",
                                                                           "unsupported"]),
                                           st.one_of(st.none(), text), u32,
                                           st.dictionaries(text, scalar, max_size=4))),
    st.builds(Throttle, unit, st.booleans()),
    st.builds(PushWake, ident),
    st.builds(ProtocolError, text, text),
)
