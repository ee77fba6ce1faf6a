"""Software stand-in for the PLC interface board.

Signal chain for each analog channel::

    engineering value -> 10-bit code -> DAC (0..2 V) -> x5 amplifier (0..10 V)
                      -> PLC analog input (0..10 V, 10-bit)

Datagrams (all big-endian, fixed size):

    telemetry  sim -> bridge   4 bytes  ch0 code (u16), ch1 code (u16); top 6 bits zero
    status     sim -> bridge   1 byte   fault flags bit0..3 (PLC digital inputs); bits 4..7 zero
    control    bridge -> sim   1 byte   bit0 parkBrake, bit1 pitchBrake, bit2 generatorTrip; bits 3..7 zero

The bridge mirrors the interface board loop: a telemetry datagram is
translated through the chain and written to the PLC inputs; a change on the
PLC digital outputs (the "interrupt") produces exactly one control datagram.
"""

from __future__ import annotations

import asyncio
import logging
import math
import struct
import time
from dataclasses import dataclass

import numpy as np

from .controller import SAFE_OUTPUTS, ControlOutputs, SetAnalogInputs, SetDigitalInputs

logger = logging.getLogger(__name__)

CODE_MAX = 1023
DAC_REF_VOLTS = 2.0
AMP_GAIN = 5.0
AIN_FULL_SCALE_VOLTS = 10.0

TELEMETRY_PORT = 46001
CONTROL_PORT = 46002


class FrameError(ValueError):
    pass


def _half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def quantize(value: float, full_scale: float) -> int:
    if not math.isfinite(value):
        raise ValueError(f"cannot quantize {value!r}")
    if full_scale <= 0:
        raise ValueError("full scale must be positive")
    clamped = min(max(value, 0.0), full_scale)
    return _half_up(clamped / full_scale * CODE_MAX)


def dac_chain(code: int) -> float:
    if not 0 <= code <= CODE_MAX:
        raise ValueError(f"code out of range: {code}")
    return AMP_GAIN * (code / CODE_MAX * DAC_REF_VOLTS)


def adc_read(volts: float, noise_sigma: float = 0.0, rng: np.random.Generator | None = None) -> int:
    if noise_sigma > 0:
        rng = rng if rng is not None else np.random.default_rng()
        volts = volts + rng.normal(0.0, noise_sigma)
    volts = min(max(volts, 0.0), AIN_FULL_SCALE_VOLTS)
    return _half_up(volts / AIN_FULL_SCALE_VOLTS * CODE_MAX)


@dataclass(frozen=True)
class FieldFrame:
    ch0: int
    ch1: int

    def __post_init__(self):
        for code in (self.ch0, self.ch1):
            if not 0 <= code <= CODE_MAX:
                raise FrameError(f"code out of range: {code}")


@dataclass(frozen=True)
class ControlFlagsWire:
    park_brake: int
    pitch_brake: int
    generator_trip: int

    @property
    def bitfield(self) -> int:
        return (self.park_brake & 1) | (self.pitch_brake & 1) << 1 | (self.generator_trip & 1) << 2

    @property
    def triplet(self) -> tuple[int, int, int]:
        return (self.park_brake, self.pitch_brake, self.generator_trip)


def encode_telemetry(frame: FieldFrame) -> bytes:
    return struct.pack(">HH", frame.ch0, frame.ch1)


def decode_telemetry(data: bytes) -> FieldFrame:
    if len(data) != 4:
        raise FrameError(f"telemetry datagram must be 4 bytes, got {len(data)}")
    ch0, ch1 = struct.unpack(">HH", data)
    if ch0 > CODE_MAX or ch1 > CODE_MAX:
        raise FrameError("telemetry code uses reserved bits")
    return FieldFrame(ch0, ch1)


def encode_controls(flags: ControlFlagsWire) -> bytes:
    return bytes([flags.bitfield])


def decode_controls(data: bytes) -> ControlFlagsWire:
    if len(data) != 1:
        raise FrameError(f"control datagram must be 1 byte, got {len(data)}")
    bits = data[0]
    if bits & 0xF8:
        raise FrameError(f"reserved control bits set: 0x{bits:02X}")
    return ControlFlagsWire(bits & 1, (bits >> 1) & 1, (bits >> 2) & 1)


def encode_status(fault_bits: int) -> bytes:
    return bytes([fault_bits & 0x0F])


def decode_status(data: bytes) -> int:
    if len(data) != 1 or data[0] & 0xF0:
        raise FrameError("malformed status datagram")
    return data[0]


class _Datagrams(asyncio.DatagramProtocol):
    def __init__(self, on_datagram, on_error):
        self.on_datagram = on_datagram
        self.on_error = on_error

    def datagram_received(self, data, addr):
        self.on_datagram(data, addr)

    def error_received(self, exc):
        self.on_error(exc)


class _NullEvents:
    def emit(self, *args, **kwargs):
        return None


class FieldBridge:
    """Controller-side end of the field bus.

    Writes into the controller go through its command queue; outputs are
    observed via the post-scan listener hook.
    """

    def __init__(self, controller, events=None, send=None, period: float = 0.1,
                 clock=time.monotonic, stale_periods: int = 3,
                 noise_sigma: float = 0.0, seed: int | None = None):
        self.controller = controller
        self.events = events or _NullEvents()
        self.send = send
        self.period = period
        self.clock = clock
        self.stale_periods = stale_periods
        self.noise_sigma = noise_sigma
        self.rng = np.random.default_rng(seed)
        self.rx_count = 0
        self.tx_count = 0
        self.last_rx = clock()
        self.stale = False
        self._transport = None
        self.peer_addr = None
        self._watchdog = None
        controller.subscribe(self._on_scan)

    def translate(self, frame: FieldFrame) -> tuple[int, int]:
        return tuple(adc_read(dac_chain(c), self.noise_sigma, self.rng) for c in (frame.ch0, frame.ch1))

    def handle_network_data(self, data: bytes) -> None:
        try:
            if len(data) == 1:
                self.controller.submit(SetDigitalInputs(decode_status(data)))
            else:
                codes = self.translate(decode_telemetry(data))
                self.controller.submit(SetAnalogInputs(codes))
        except FrameError as exc:
            self.events.emit("fieldbus", "malformed_frame", severity="warning",
                             direction="telemetry", error=str(exc), data=data.hex())
            return
        self.rx_count += 1
        self.last_rx = self.clock()
        if self.stale:
            self.stale = False
            self.events.emit("fieldbus", "input_restored")

    def handle_gpio_data(self, triplet: tuple[int, int, int]) -> None:
        payload = encode_controls(ControlFlagsWire(*triplet))
        self.tx_count += 1
        if self.send is not None:
            self.send(payload)
        elif self._transport is not None and self.peer_addr is not None:
            try:
                self._transport.sendto(payload, self.peer_addr)
            except OSError as exc:
                self.events.emit("fieldbus", "socket_error", severity="error", error=str(exc))

    def _on_scan(self, previous, current) -> None:
        if current.digital_out != previous.digital_out:
            self.handle_gpio_data(current.digital_out)

    def check_stale(self) -> bool:
        if not self.stale and self.clock() - self.last_rx > self.stale_periods * self.period:
            self.stale = True
            self.events.emit("fieldbus", "stale_input", severity="warning",
                             silent_for=round(self.clock() - self.last_rx, 6))
        return self.stale

    async def serve(self, host: str, port: int, sim_addr: tuple[str, int] | None = None,
                    retries: int = 5, backoff: float = 0.05, watchdog: bool = True) -> tuple[str, int]:
        loop = asyncio.get_running_loop()
        if sim_addr is not None:
            self.peer_addr = sim_addr
        delay = backoff
        for attempt in range(retries + 1):
            try:
                self._transport, _ = await loop.create_datagram_endpoint(
                    lambda: _Datagrams(lambda d, a: self.handle_network_data(d), self._socket_error),
                    local_addr=(host, port),
                )
                break
            except OSError as exc:
                self.events.emit("fieldbus", "socket_error", severity="error",
                                 error=str(exc), attempt=attempt)
                if attempt == retries:
                    raise
                await asyncio.sleep(delay)
                delay *= 2
        self.last_rx = self.clock()
        if watchdog:
            self._watchdog = asyncio.ensure_future(self._watch())
        return self._transport.get_extra_info("sockname")[:2]

    def _socket_error(self, exc) -> None:
        self.events.emit("fieldbus", "socket_error", severity="error", error=str(exc))

    async def _watch(self) -> None:
        while True:
            await asyncio.sleep(self.period)
            self.check_stale()

    def close(self) -> None:
        if self._watchdog is not None:
            self._watchdog.cancel()
        if self._transport is not None:
            self._transport.close()


class SimEndpoint:
    """Simulation-side end: publishes telemetry, receives control flags."""

    def __init__(self, full_scale_wind: float, full_scale_rotor: float, events=None, send=None):
        self.full_scale_wind = full_scale_wind
        self.full_scale_rotor = full_scale_rotor
        self.events = events or _NullEvents()
        self.send = send
        self.controls: ControlOutputs = SAFE_OUTPUTS
        self.rx_count = 0
        self.tx_count = 0
        self.fault_bits = 0
        self._transport = None
        self.peer_addr = None

    def frame(self, v_wind: float, w_rotor: float) -> FieldFrame:
        return FieldFrame(quantize(v_wind, self.full_scale_wind), quantize(w_rotor, self.full_scale_rotor))

    def _emit(self, payload: bytes) -> None:
        self.tx_count += 1
        if self.send is not None:
            self.send(payload)
        elif self._transport is not None and self.peer_addr is not None:
            self._transport.sendto(payload, self.peer_addr)

    def publish(self, v_wind: float, w_rotor: float, fault_bits: int = 0) -> None:
        """Send one telemetry datagram, preceded by a status datagram on fault change."""
        if fault_bits != self.fault_bits:
            self.fault_bits = fault_bits
            self._emit(encode_status(fault_bits))
        self._emit(encode_telemetry(self.frame(v_wind, w_rotor)))

    def datagram_received(self, data: bytes, addr=None) -> None:
        try:
            flags = decode_controls(data)
        except FrameError as exc:
            self.events.emit("fieldbus", "malformed_frame", severity="warning",
                             direction="control", error=str(exc), data=data.hex())
            return
        self.rx_count += 1
        self.controls = ControlOutputs.from_triplet(*flags.triplet)

    async def serve(self, host: str, port: int, bridge_addr: tuple[str, int] | None = None) -> tuple[str, int]:
        loop = asyncio.get_running_loop()
        if bridge_addr is not None:
            self.peer_addr = bridge_addr
        self._transport, _ = await loop.create_datagram_endpoint(
            lambda: _Datagrams(self.datagram_received, lambda exc: None),
            local_addr=(host, port),
        )
        return self._transport.get_extra_info("sockname")[:2]

    def close(self) -> None:
        if self._transport is not None:
            self._transport.close()
