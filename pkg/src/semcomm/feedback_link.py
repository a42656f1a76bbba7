"""Tx/Rx feedback link: pilot announcements forward, rewards backward.

Frame layout (all frames)::

    magic    u32 BE   0x53504731 ("SPG1")
    type     u8       1 = pilot, 2 = reward
    batch_id u64 LE
    count    u32 LE
    payload           pilot: offset u64 LE; reward: count x float64 LE

Frames are self-delimiting: the 17-byte header fixes the payload length.
"""

from __future__ import annotations

import socket
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple, Union

import numpy as np

from .errors import ProtocolError

MAGIC = 0x53504731
TYPE_PILOT = 1
TYPE_REWARD = 2
HEADER = struct.Struct("<BQI")  # follows the big-endian magic
HEADER_SIZE = 4 + HEADER.size
MAX_COUNT = 1 << 24


@dataclass(frozen=True)
class PilotBatchMsg:
    batch_id: int
    sample_count: int
    pilot_index_offset: int


@dataclass(frozen=True)
class RewardMsg:
    batch_id: int
    rewards: tuple

    @property
    def sample_count(self) -> int:
        return len(self.rewards)

    def as_array(self) -> np.ndarray:
        return np.array(self.rewards, dtype=np.float64)


Message = Union[PilotBatchMsg, RewardMsg]


def _u(value, bits, name):
    if not isinstance(value, (int, np.integer)) or not 0 <= value < (1 << bits):
        raise ValueError(f"{name} must be an unsigned {bits}-bit integer, got {value!r}")
    return int(value)


def encode_frame(msg: Message) -> bytes:
    magic = struct.pack(">I", MAGIC)
    if isinstance(msg, PilotBatchMsg):
        head = HEADER.pack(TYPE_PILOT, _u(msg.batch_id, 64, "batch_id"), _u(msg.sample_count, 32, "sample_count"))
        return magic + head + struct.pack("<Q", _u(msg.pilot_index_offset, 64, "pilot_index_offset"))
    if isinstance(msg, RewardMsg):
        n = len(msg.rewards)
        head = HEADER.pack(TYPE_REWARD, _u(msg.batch_id, 64, "batch_id"), _u(n, 32, "count"))
        return magic + head + np.asarray(msg.rewards, dtype="<f8").tobytes()
    raise TypeError(f"cannot encode {type(msg).__name__}")


def payload_size(msg_type: int, count: int) -> int:
    if msg_type == TYPE_PILOT:
        return 8
    if msg_type == TYPE_REWARD:
        return 8 * count
    raise ProtocolError(f"unknown message type {msg_type}", 4)


def parse_header(data: bytes) -> tuple[int, int, int]:
    if len(data) < HEADER_SIZE:
        raise ProtocolError(f"length mismatch: header needs {HEADER_SIZE} bytes, got {len(data)}", len(data))
    (magic,) = struct.unpack(">I", data[:4])
    if magic != MAGIC:
        raise ProtocolError(f"bad magic 0x{magic:08x}", 0)
    msg_type, batch_id, count = HEADER.unpack(data[4:HEADER_SIZE])
    if msg_type not in (TYPE_PILOT, TYPE_REWARD):
        raise ProtocolError(f"unknown message type {msg_type}", 4)
    if msg_type == TYPE_REWARD and count > MAX_COUNT:
        raise ProtocolError(f"reward count {count} exceeds limit {MAX_COUNT}", 13)
    return msg_type, batch_id, count


def decode_frame(data: bytes) -> Message:
    data = bytes(data)
    msg_type, batch_id, count = parse_header(data)
    expected = HEADER_SIZE + payload_size(msg_type, count)
    if len(data) != expected:
        raise ProtocolError(f"length mismatch: frame is {len(data)} bytes, header implies {expected}",
                            min(len(data), expected))
    if msg_type == TYPE_PILOT:
        (offset,) = struct.unpack("<Q", data[HEADER_SIZE:])
        return PilotBatchMsg(batch_id, count, offset)
    rewards = np.frombuffer(data, dtype="<f8", offset=HEADER_SIZE)
    bad = np.flatnonzero(~(np.isfinite(rewards) & (rewards <= 0.0)))
    if bad.size:
        raise ProtocolError(f"reward {rewards[bad[0]]!r} is not finite and non-positive", HEADER_SIZE + 8 * int(bad[0]))
    return RewardMsg(batch_id, tuple(rewards.tolist()))


def read_frame(stream) -> Message:
    """Read exactly one frame from a binary file-like object."""
    head = _read_exact(stream, HEADER_SIZE, 0)
    msg_type, _, count = parse_header(head)
    body = _read_exact(stream, payload_size(msg_type, count), HEADER_SIZE)
    return decode_frame(head + body)


def _read_exact(stream, n: int, base: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            raise ProtocolError(f"length mismatch: stream ended after {len(buf)} of {n} bytes", base + len(buf))
        buf += chunk
    return buf


class InProcessLink:
    """Passes message objects through two FIFO queues."""

    def __init__(self):
        self._forward = deque()
        self._backward = deque()

    def send_to_rx(self, msg: Message) -> None:
        self._forward.append(msg)

    def recv_at_rx(self) -> Message:
        return self._forward.popleft()

    def send_to_tx(self, msg: Message) -> None:
        self._backward.append(msg)

    def recv_at_tx(self) -> Message:
        return self._backward.popleft()

    def close(self) -> None:
        pass


class StreamLink:
    """Serialises every message over a loopback socket pair (one per direction)."""

    def __init__(self):
        self._tx_sock, self._rx_sock = socket.socketpair()
        self._tx_r, self._tx_w = self._tx_sock.makefile("rb"), self._tx_sock.makefile("wb")
        self._rx_r, self._rx_w = self._rx_sock.makefile("rb"), self._rx_sock.makefile("wb")
        self.bytes_sent = 0

    def _write(self, w, msg):
        frame = encode_frame(msg)
        w.write(frame)
        w.flush()
        self.bytes_sent += len(frame)

    def send_to_rx(self, msg: Message) -> None:
        self._write(self._tx_w, msg)

    def recv_at_rx(self) -> Message:
        return read_frame(self._rx_r)

    def send_to_tx(self, msg: Message) -> None:
        self._write(self._rx_w, msg)

    def recv_at_tx(self) -> Message:
        return read_frame(self._tx_r)

    def close(self) -> None:
        for f in (self._tx_r, self._tx_w, self._rx_r, self._rx_w, self._tx_sock, self._rx_sock):
            f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def make_link(kind: str):
    if kind == "inprocess":
        return InProcessLink()
    if kind == "stream":
        return StreamLink()
    raise ValueError(f"unknown link kind {kind!r}")


TX_ALLOWED = frozenset({"theta", "pilot_s", "x", "reward"})
RX_ALLOWED = frozenset({"psi", "pilot_z", "y"})


@dataclass
class AuditTrace:
    """Record of which side touched which resource."""

    events: list = field(default_factory=list)

    def record(self, side: str, resource: str) -> None:
        self.events.append((side, resource))


class AuditResult(NamedTuple):
    passed: bool
    violations: list

    def __bool__(self):
        return self.passed


def barrier_audit(trace: AuditTrace) -> AuditResult:
    """Pass iff the transmitter only touched {theta, pilot_s, x, reward}
    and the receiver only {psi, pilot_z, y}."""
    allowed = {"tx": TX_ALLOWED, "rx": RX_ALLOWED}
    seen, violations = set(), []
    for side, resource in trace.events:
        if resource not in allowed.get(side, ()) and (side, resource) not in seen:
            seen.add((side, resource))
            violations.append(f"{side} accessed {resource}")
    return AuditResult(not violations, violations)


