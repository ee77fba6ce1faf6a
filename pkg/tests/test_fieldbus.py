import asyncio
import socket

import pytest
from hypothesis import given, strategies as st

from conftest import run
from honeyturbine.controller import Controller, ControllerConfig, WriteCoils, scale_analog_in
from honeyturbine.fieldbus import (
    ControlFlagsWire, FieldBridge, FieldFrame, FrameError, SimEndpoint, adc_read, dac_chain,
    decode_controls, decode_status, decode_telemetry, encode_controls, encode_status, encode_telemetry,
    quantize,
)
from honeyturbine.proxycap import EventLog


class FakeClock:
    def __init__(self):
        self.t = 0.0

    def __call__(self):
        return self.t


@pytest.fixture
def events():
    return EventLog()


@pytest.fixture
def wire():
    return []


@pytest.fixture
def bridge(events, wire):
    clock = FakeClock()
    b = FieldBridge(Controller(events=events), events=events, send=wire.append, clock=clock)
    b.fake_clock = clock
    return b


class TestQuantize:
    def test_zero(self):
        assert quantize(0.0, 25.0) == 0

    def test_full_scale(self):
        assert quantize(25.0, 25.0) == 1023

    def test_half_up_midpoint(self):
        # 12.5/25 * 1023 = 511.5 exactly
        assert quantize(12.5, 25.0) == 512

    def test_clamps(self):
        assert quantize(-3.0, 25.0) == 0
        assert quantize(40.0, 25.0) == 1023

    @pytest.mark.parametrize("bad", [float("nan"), float("inf")])
    def test_non_finite(self, bad):
        with pytest.raises(ValueError):
            quantize(bad, 25.0)

    def test_bad_full_scale(self):
        with pytest.raises(ValueError):
            quantize(1.0, 0.0)

    @given(x=st.floats(0, 25.0))
    def test_error_bound(self, x):
        assert abs(scale_analog_in(quantize(x, 25.0), 25.0) - x) <= 25.0 / 1023


class TestChain:
    def test_dac_zero(self):
        assert dac_chain(0) == 0.0

    def test_dac_full_scale(self):
        assert dac_chain(1023) == pytest.approx(10.0)

    def test_dac_mid(self):
        assert dac_chain(512) == pytest.approx(5.0049, abs=5e-5)

    def test_dac_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            dac_chain(1024)

    def test_adc_ends(self):
        assert adc_read(0.0) == 0
        assert adc_read(10.0) == 1023

    def test_lossless_over_every_code(self):
        assert [adc_read(dac_chain(c)) for c in range(1024)] == list(range(1024))

    def test_noise_is_seeded(self):
        import numpy as np
        a = [adc_read(5.0, 0.05, np.random.default_rng(3)) for _ in range(5)]
        b = [adc_read(5.0, 0.05, np.random.default_rng(3)) for _ in range(5)]
        assert a == b


class TestFrames:
    @pytest.mark.parametrize("codes,hexed", [((0, 0), "00000000"), ((512, 100), "02000064"),
                                             ((1023, 1023), "03ff03ff")])
    def test_telemetry_layout(self, codes, hexed):
        assert encode_telemetry(FieldFrame(*codes)).hex() == hexed
        assert decode_telemetry(bytes.fromhex(hexed)) == FieldFrame(*codes)

    @pytest.mark.parametrize("data", [b"\x00\x00\x00", b"\x04\x00\x00\x00", b"\x00" * 5])
    def test_telemetry_rejects(self, data):
        with pytest.raises(FrameError):
            decode_telemetry(data)

    def test_frame_range(self):
        with pytest.raises(FrameError):
            FieldFrame(1024, 0)

    @pytest.mark.parametrize("byte,triplet", [(0x07, (1, 1, 1)), (0x00, (0, 0, 0)), (0x04, (0, 0, 1))])
    def test_controls(self, byte, triplet):
        assert decode_controls(bytes([byte])).triplet == triplet

    @pytest.mark.parametrize("data", [b"\x88", b"\x08", b"", b"\x01\x01"])
    def test_controls_rejects(self, data):
        with pytest.raises(FrameError):
            decode_controls(data)

    def test_status(self):
        assert decode_status(encode_status(0b1001)) == 9
        with pytest.raises(FrameError):
            decode_status(b"\x10")

    @given(pb=st.integers(0, 1), ptb=st.integers(0, 1), gt=st.integers(0, 1))
    def test_controls_roundtrip(self, pb, ptb, gt):
        flags = ControlFlagsWire(pb, ptb, gt)
        assert decode_controls(encode_controls(flags)) == flags

    @given(a=st.integers(0, 1023), b=st.integers(0, 1023))
    def test_telemetry_roundtrip(self, a, b):
        data = encode_telemetry(FieldFrame(a, b))
        assert data[0] & 0xFC == 0 and data[2] & 0xFC == 0
        assert decode_telemetry(data) == FieldFrame(a, b)


class TestBridge:
    def test_telemetry_reaches_analog_in(self, bridge):
        bridge.handle_network_data(encode_telemetry(FieldFrame(409, 0)))
        assert bridge.controller.scan().analog_in == (409, 0)
        assert bridge.rx_count == 1

    def test_status_reaches_digital_in(self, bridge):
        bridge.handle_network_data(encode_status(0b0100))
        assert bridge.controller.scan().digital_in == 4

    def test_malformed_dropped_with_event(self, bridge, events):
        bridge.handle_network_data(b"\x88")
        bridge.handle_network_data(b"\xff\xff\x00\x00")
        assert bridge.rx_count == 0
        assert len(events.of_kind("malformed_frame")) == 2

    def test_park_to_startup_edge_emits_one_datagram(self, bridge, wire):
        ctl = bridge.controller
        ctl.scan()
        assert wire == []  # ParkBrake output is the initial image, no edge
        bridge.handle_network_data(encode_telemetry(FieldFrame(409, 0)))
        ctl.scan()
        ctl.scan()
        assert wire == [b"\x04"]

    def test_n_edges_n_datagrams(self, bridge, wire):
        ctl = bridge.controller
        # toggle manual override park brake: each scan changes the outputs
        for k in range(10):
            ctl.submit(WriteCoils(0, (bool(k % 2 == 0), False, False, False, True)))
            ctl.scan()
        outs = [decode_controls(w).triplet for w in wire]
        assert len(wire) == 10
        assert all(a != b for a, b in zip(outs, outs[1:]))

    def test_stale_after_three_periods(self, bridge, events):
        bridge.fake_clock.t = 0.3
        assert not bridge.check_stale()
        bridge.fake_clock.t = 0.31
        assert bridge.check_stale()
        assert bridge.check_stale()
        assert len(events.of_kind("stale_input")) == 1
        bridge.handle_network_data(encode_telemetry(FieldFrame(1, 1)))
        assert not bridge.stale
        assert len(events.of_kind("input_restored")) == 1

    def test_stale_holds_last_values(self, bridge):
        bridge.handle_network_data(encode_telemetry(FieldFrame(409, 77)))
        bridge.fake_clock.t = 5.0
        bridge.check_stale()
        assert bridge.controller.scan().analog_in == (409, 77)


class TestSimEndpoint:
    def test_frame_codes(self):
        sim = SimEndpoint(25.0, 2.5)
        assert sim.frame(12.5, 2.5) == FieldFrame(512, 1023)

    def test_status_only_on_change(self):
        sent = []
        sim = SimEndpoint(25.0, 2.5, send=sent.append)
        sim.publish(5, 0, 0)
        sim.publish(5, 0, 8)
        sim.publish(5, 0, 8)
        assert [len(d) for d in sent] == [4, 1, 4, 4]
        assert sent[1] == b"\x08"

    def test_controls_applied(self):
        sim = SimEndpoint(25.0, 2.5)
        sim.datagram_received(b"\x04")
        assert sim.controls.triplet == (0, 0, 1)
        assert sim.rx_count == 1

    def test_malformed_control_ignored(self, events):
        sim = SimEndpoint(25.0, 2.5, events=events)
        sim.datagram_received(b"\x88")
        assert sim.controls.triplet == (1, 1, 1)
        assert events.of_kind("malformed_frame")[0].attrs["direction"] == "control"


class TestUdp:
    def test_loopback_round_trip(self):
        async def scenario():
            ctl = Controller(ControllerConfig())
            bridge = FieldBridge(ctl)
            sim = SimEndpoint(25.0, 2.5)
            b_addr = await bridge.serve("127.0.0.1", 0, watchdog=False)
            s_addr = await sim.serve("127.0.0.1", 0, bridge_addr=b_addr)
            bridge.peer_addr = s_addr
            sim.publish(10.0, 0.0)
            for _ in range(50):
                await asyncio.sleep(0.01)
                if bridge.rx_count:
                    break
            ctl.scan()
            for _ in range(50):
                await asyncio.sleep(0.01)
                if sim.rx_count:
                    break
            bridge.close()
            sim.close()
            return ctl.snapshot, sim.controls

        img, controls = run(scenario())
        assert img.analog_in == (quantize(10.0, 25.0), 0)
        assert controls.triplet == (0, 0, 1)

    def test_bind_failure_retries_then_raises(self, events):
        blocker = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        blocker.bind(("127.0.0.1", 0))
        port = blocker.getsockname()[1]
        try:
            bridge = FieldBridge(Controller(), events=events)
            with pytest.raises(OSError):
                run(bridge.serve("127.0.0.1", port, retries=2, backoff=0.001, watchdog=False))
        finally:
            blocker.close()
        assert len(events.of_kind("socket_error")) == 3
