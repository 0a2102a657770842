"""Transport tests: frame round-trips, truncation fuzz, version
compatibility, FIFO under faults, deterministic replay, socket smoke."""

import random

import pytest

from fabriclab.transport import (
    SCHEMA_VERSION,
    ChannelFaultProfile,
    ControlMessage,
    FramingError,
    InProcessBus,
    KIND_TAGS,
    SocketTransport,
    UnknownVersionError,
    decode,
    encode,
    socket_send,
)

SAMPLE_PAYLOADS = {
    "envelope_push": {
        "aggregate_id": "t0:0-1:b",
        "version": 7,
        "r_min": 1e8,
        "r_max": 9e8,
        "reroute_permitted": True,
        "weights": [0.3, 0.2, 0.2, 0.2, 0.1],
        "issued_at": 1.5,
        "staleness_bound": 0.5,
    },
    "telemetry_report": {"link_utils": {"tor0>agg0": 0.73}, "aggregates": {}},
    "action_log_batch": {"entries": [{"agg": "x", "reroute": "trigger", "t": 0.2}]},
    "bottleneck_alert": {"link": "agg0>spine1", "util": 0.91, "aggregates": ["x"]},
    "override": {"agent": 4, "directive": "freeze"},
    "model_state": {"agent": 2, "blob": "AAEC"},
}


class TestFraming:
    @pytest.mark.parametrize("kind", sorted(KIND_TAGS))
    def test_roundtrip_identity(self, kind):
        msg = ControlMessage(kind=kind, payload=SAMPLE_PAYLOADS[kind])
        out = decode(encode(msg))
        assert out.kind == kind
        assert out.payload == msg.payload
        assert out.version == SCHEMA_VERSION

    def test_every_truncation_is_a_framing_error(self):
        frame = encode(ControlMessage("envelope_push", SAMPLE_PAYLOADS["envelope_push"]))
        for cut in range(len(frame)):
            with pytest.raises(FramingError):
                decode(frame[:cut])

    def test_previous_version_accepted_with_defaults(self):
        payload = dict(SAMPLE_PAYLOADS["envelope_push"])
        del payload["staleness_bound"]  # field added in schema version 2
        v1 = encode(ControlMessage("envelope_push", payload, version=1))
        out = decode(v1)
        assert out.version == 1
        assert out.payload["staleness_bound"] == 0.5

    def test_future_version_rejected(self):
        frame = bytearray(encode(ControlMessage("override", SAMPLE_PAYLOADS["override"])))
        frame[4] = SCHEMA_VERSION + 1
        with pytest.raises(UnknownVersionError):
            decode(bytes(frame))

    def test_unknown_kind_tag_rejected(self):
        frame = bytearray(encode(ControlMessage("override", SAMPLE_PAYLOADS["override"])))
        frame[5] = 250
        with pytest.raises(FramingError):
            decode(bytes(frame))

    def test_unknown_kind_cannot_be_constructed(self):
        with pytest.raises(ValueError):
            ControlMessage("gossip", {})


def run_bus(seed, n=200, profile=None):
    bus = InProcessBus(seed=seed, fault_profile=profile)
    received = []
    bus.subscribe("ctrl", lambda sender, msg: received.append((sender, msg.payload["i"])))
    t = 0.0
    rng = random.Random(999)  # message timing independent of the bus seed
    for i in range(n):
        bus.send("agent0", "ctrl", ControlMessage("telemetry_report", {"i": i}), now=t)
        bus.dispatch(t)
        t += 0.05 * rng.choice([1, 1, 2])
    for _ in range(100):
        bus.dispatch(t)
        t += 0.05
    return received, bus


class TestInProcessBus:
    def test_zero_fault_everything_in_order(self):
        received, bus = run_bus(1)
        assert [i for _, i in received] == list(range(200))
        assert bus.dropped_count == 0

    def test_per_sender_fifo_under_random_delays(self):
        profile = ChannelFaultProfile(delay=("uniform", 0.0, 0.3))
        received, _ = run_bus(7, profile=profile)
        indices = [i for _, i in received]
        assert indices == sorted(indices)
        assert len(indices) == 200

    def test_drops_match_deterministic_replay(self):
        profile = ChannelFaultProfile(drop_probability=0.3)
        first, bus1 = run_bus(42, n=10_000, profile=profile)
        second, bus2 = run_bus(42, n=10_000, profile=profile)
        assert first == second
        assert bus1.dropped_count == bus2.dropped_count
        # realized delivery count inside the binomial 99% interval
        n, p = 10_000, 0.7
        sigma = (n * p * (1 - p)) ** 0.5
        assert abs(len(first) - n * p) < 2.58 * sigma

    def test_outage_window_blocks_delivery(self):
        profile = ChannelFaultProfile(outage_windows=((1.0, 2.0),))
        bus = InProcessBus(seed=3, fault_profile=profile)
        got = []
        bus.subscribe("a", lambda s, m: got.append(m.payload["i"]))
        assert bus.send("c", "a", ControlMessage("override", {"i": 1}), now=1.5) == "outage"
        bus.dispatch(1.5)
        assert got == []
        assert bus.send("c", "a", ControlMessage("override", {"i": 2}), now=2.5) == "queued"
        bus.dispatch(2.5)
        assert got == [2]

    def test_closed_bus_raises(self):
        bus = InProcessBus(seed=0)
        bus.close()
        with pytest.raises(Exception):
            bus.send("a", "b", ControlMessage("override", {}), now=0.0)


class TestSocketTransport:
    def test_loopback_roundtrip(self):
        server = SocketTransport()
        got = []
        server.on_message(lambda msg: got.append(msg))
        server.start()
        try:
            msg = ControlMessage("model_state", {"agent": 1, "blob": "xyz"})
            socket_send(server.address, msg)
            import time

            deadline = time.time() + 3.0
            while not got and time.time() < deadline:
                time.sleep(0.01)
        finally:
            server.stop()
        assert got and got[0].payload["agent"] == 1
