"""Controller-agent message bus with byte-level framing and fault injection.

Frame format (documented byte-exactly):

    offset 0: 4-byte big-endian unsigned length L = len(rest of frame)
    offset 4: 1-byte schema version
    offset 5: 1-byte kind tag (see KIND_TAGS)
    offset 6: L-2 bytes of UTF-8 JSON payload with sorted keys

Decoding a truncated frame raises FramingError, never returns a partial
message. A decoder at schema version N accepts versions <= N; fields added
in later versions carry defaults when absent (additive-field rule). Unknown
kinds or future versions are rejected with an error, not a crash.

The default in-process bus delivers on simulator dispatch ticks with
per-sender FIFO order even under injected delays; drops and outages are
seed-deterministic. The socket transport reuses the same frames over TCP
for split-process runs and is excluded from byte-identical trace tests.
"""

from __future__ import annotations

import json
import random
import socket
import struct
import threading
import zlib
from dataclasses import dataclass, field

SCHEMA_VERSION = 2

KIND_TAGS = {
    "envelope_push": 1,
    "telemetry_report": 2,
    "action_log_batch": 3,
    "bottleneck_alert": 4,
    "override": 5,
    "model_state": 6,
}
TAG_KINDS = {v: k for k, v in KIND_TAGS.items()}

# fields added after version 1, with the defaults a v2 decoder fills in
_V2_DEFAULTS = {
    "envelope_push": {"staleness_bound": 0.5},
}

_LENGTH = struct.Struct(">I")


class FramingError(ValueError):
    pass


class UnknownVersionError(FramingError):
    pass


class ChannelClosedError(RuntimeError):
    pass


@dataclass(frozen=True)
class ControlMessage:
    kind: str
    payload: dict
    version: int = SCHEMA_VERSION
    send_time: float = 0.0

    def __post_init__(self):
        if self.kind not in KIND_TAGS:
            raise ValueError(f"unknown message kind {self.kind!r}")


def encode(msg: ControlMessage) -> bytes:
    body = json.dumps(msg.payload, sort_keys=True, separators=(",", ":")).encode()
    rest = bytes([msg.version, KIND_TAGS[msg.kind]]) + body
    return _LENGTH.pack(len(rest)) + rest


def decode(frame: bytes) -> ControlMessage:
    if len(frame) < 4:
        raise FramingError("frame shorter than length prefix")
    (length,) = _LENGTH.unpack_from(frame, 0)
    if len(frame) != 4 + length:
        raise FramingError(f"declared {length} bytes, frame carries {len(frame) - 4}")
    if length < 2:
        raise FramingError("frame too short for version and kind")
    version = frame[4]
    tag = frame[5]
    if version > SCHEMA_VERSION or version < 1:
        raise UnknownVersionError(f"unsupported schema version {version}")
    kind = TAG_KINDS.get(tag)
    if kind is None:
        raise FramingError(f"unknown kind tag {tag}")
    try:
        payload = json.loads(frame[6:].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FramingError(f"payload not valid JSON: {exc}") from exc
    if version < SCHEMA_VERSION:
        for key, default in _V2_DEFAULTS.get(kind, {}).items():
            payload.setdefault(key, default)
    return ControlMessage(kind=kind, payload=payload, version=version)


@dataclass
class ChannelFaultProfile:
    """Seed-deterministic control-channel faults."""

    drop_probability: float = 0.0
    delay: tuple = ("constant", 0.0)  # or ("uniform", lo, hi)
    outage_windows: tuple = ()  # ((start, end), ...) sim-time seconds
    drop_kinds: tuple = ()  # restrict drops to these kinds; empty = all

    def in_outage(self, t: float) -> bool:
        return any(start <= t < end for start, end in self.outage_windows)

    def draw_delay(self, rng: random.Random) -> float:
        if self.delay[0] == "constant":
            return float(self.delay[1])
        if self.delay[0] == "uniform":
            return rng.uniform(self.delay[1], self.delay[2])
        raise ValueError(f"unknown delay distribution {self.delay[0]!r}")


class InProcessBus:
    """Deterministic bus dispatched on simulator ticks.

    Delivery per fault profile; per-sender FIFO is preserved by never letting
    a later message overtake an earlier one from the same sender.
    """

    def __init__(self, seed: int = 0, fault_profile: ChannelFaultProfile | None = None, trace=None):
        self.faults = fault_profile or ChannelFaultProfile()
        self._rng = random.Random(zlib.crc32(f"bus:{seed}".encode()))
        self.trace = trace
        self._subscribers: dict[str, list] = {}
        self._queue: list[tuple[float, int, str, str, bytes]] = []
        self._seq = 0
        self._last_delivery: dict[str, float] = {}
        self.closed = False
        self.sent_count = 0
        self.delivered_count = 0
        self.dropped_count = 0

    def subscribe(self, recipient: str, handler) -> None:
        self._subscribers.setdefault(recipient, []).append(handler)

    def send(self, sender: str, recipient: str, msg: ControlMessage, now: float) -> str:
        """Queue a message; returns the delivery outcome kind."""
        if self.closed:
            raise ChannelClosedError("bus is closed")
        frame = encode(msg)
        self.sent_count += 1
        if self.faults.in_outage(now):
            self.dropped_count += 1
            if self.trace is not None:
                self.trace.record("msg_outage", now, kind=msg.kind, sender=sender)
            return "outage"
        if self.faults.drop_probability > 0.0 and (
            not self.faults.drop_kinds or msg.kind in self.faults.drop_kinds
        ):
            if self._rng.random() < self.faults.drop_probability:
                self.dropped_count += 1
                if self.trace is not None:
                    self.trace.record("msg_drop", now, kind=msg.kind, sender=sender)
                return "dropped"
        delay = self.faults.draw_delay(self._rng)
        deliver_at = now + delay
        # FIFO per sender: a delayed head blocks everything behind it
        deliver_at = max(deliver_at, self._last_delivery.get(sender, -1.0))
        self._last_delivery[sender] = deliver_at
        self._queue.append((deliver_at, self._seq, sender, recipient, frame))
        self._seq += 1
        return "queued"

    def dispatch(self, now: float) -> int:
        """Deliver everything due by ``now``; returns the delivery count."""
        if self.faults.in_outage(now):
            return 0
        due = [m for m in self._queue if m[0] <= now]
        if not due:
            return 0
        due.sort(key=lambda m: (m[0], m[1]))
        self._queue = [m for m in self._queue if m[0] > now]
        for _, _, sender, recipient, frame in due:
            msg = decode(frame)
            for handler in self._subscribers.get(recipient, []):
                handler(sender, msg)
            self.delivered_count += 1
        return len(due)

    def close(self) -> None:
        self.closed = True


class SocketTransport:
    """Frame-compatible TCP transport for split-process operation.

    Relaxes tick determinism (wall-clock delivery); not used by the
    golden-trace tests.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self._server = socket.create_server((host, port))
        self.address = self._server.getsockname()
        self._handlers: list = []
        self._thread: threading.Thread | None = None
        self._running = False

    def on_message(self, handler) -> None:
        self._handlers.append(handler)

    def start(self) -> None:
        self._running = True
        self._thread = threading.Thread(target=self._serve, daemon=True)
        self._thread.start()

    def _serve(self) -> None:
        self._server.settimeout(0.2)
        while self._running:
            try:
                conn, _ = self._server.accept()
            except socket.timeout:
                continue
            with conn:
                try:
                    while True:
                        header = self._recv_exact(conn, 4)
                        if header is None:
                            break
                        (length,) = _LENGTH.unpack(header)
                        body = self._recv_exact(conn, length)
                        if body is None:
                            break
                        msg = decode(header + body)
                        for handler in self._handlers:
                            handler(msg)
                except FramingError:
                    break

    @staticmethod
    def _recv_exact(conn, n: int) -> bytes | None:
        chunks = b""
        while len(chunks) < n:
            part = conn.recv(n - len(chunks))
            if not part:
                return None
            chunks += part
        return chunks

    def stop(self) -> None:
        self._running = False
        if self._thread is not None:
            self._thread.join(timeout=2.0)
        self._server.close()


def socket_send(address, msg: ControlMessage) -> None:
    with socket.create_connection(address, timeout=2.0) as conn:
        conn.sendall(encode(msg))
