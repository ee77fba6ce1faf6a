"""PLC runtime for the turbine: process image, scan cycle and the control FSM.

The control program is a four-state Moore machine driven by two guards
(wind speed in range, rotor speed in generation band).  Each state maps to a
fixed output triplet ``(parkBrake, pitchBrake, generatorTrip)`` plus a blade
pitch setpoint.  Everything Modbus/S7/web can see lives in `ProcessImage`,
which is immutable and republished after every scan.

Memory map (all addresses zero-based):

    HR0  FSM state encoding (0 ParkBrake, 1 Startup, 2 Generating, 3 PitchBrake)
    HR1  round(wRotor * 100)          [rad/s * 100]
    HR2  round(vWind * 100)           [m/s * 100]
    HR3  round(estimated power)       [kW]
    HR4  fault bitfield (bit0 rotor, bit1 gearbox, bit2 generator, bit3 brake)
    HR5..HR15  general purpose, retained

    coil 0..2  manual values for parkBrake, pitchBrake, generatorTrip
    coil 3     emergency stop (forces ParkBrake)
    coil 4     manual override (coils 0..2 drive the digital outputs)
"""

from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable

N_REGISTERS = 16
N_COILS = 16
ANALOG_MAX = 1023

HR_STATE = 0
HR_ROTOR = 1
HR_WIND = 2
HR_POWER = 3
HR_FAULTS = 4
CONTROLLER_OWNED = range(HR_STATE, HR_FAULTS + 1)

COIL_PARK_BRAKE = 0
COIL_PITCH_BRAKE = 1
COIL_GENERATOR_TRIP = 2
COIL_EMERGENCY_STOP = 3
COIL_MANUAL_OVERRIDE = 4

PITCH_FEATHERED = 95.0
PITCH_STARTUP = 1.0
PITCH_REGULATED = 0.0


class FsmState(enum.IntEnum):
    PARK_BRAKE = 0
    STARTUP = 1
    GENERATING = 2
    PITCH_BRAKE = 3

    @property
    def label(self) -> str:
        return _STATE_LABELS[self]


_STATE_LABELS = {
    FsmState.PARK_BRAKE: "ParkBrake",
    FsmState.STARTUP: "Startup",
    FsmState.GENERATING: "Generating",
    FsmState.PITCH_BRAKE: "PitchBrake",
}


class CpuMode(str, enum.Enum):
    RUN = "RUN"
    STOP = "STOP"


@dataclass(frozen=True)
class ControlOutputs:
    park_brake: int
    pitch_brake: int
    generator_trip: int
    pitch_setpoint: float

    @property
    def triplet(self) -> tuple[int, int, int]:
        return (self.park_brake, self.pitch_brake, self.generator_trip)

    @classmethod
    def from_triplet(cls, park_brake: int, pitch_brake: int, generator_trip: int) -> "ControlOutputs":
        """Rebuild outputs from the three digital lines alone.

        The field wiring carries only the brake/trip flags, so the pitch
        setpoint is recovered from them: a pitch brake (or a full park
        stop) feathers, a tripped generator means startup pitch, and a
        connected generator without pitch brake means regulation.
        """
        pb, ptb, gt = int(bool(park_brake)), int(bool(pitch_brake)), int(bool(generator_trip))
        if ptb:
            pitch = PITCH_FEATHERED
        elif gt:
            pitch = PITCH_FEATHERED if pb else PITCH_STARTUP
        else:
            pitch = PITCH_REGULATED
        return cls(pb, ptb, gt, pitch)


STATE_OUTPUTS = {
    FsmState.PARK_BRAKE: ControlOutputs(1, 1, 1, PITCH_FEATHERED),
    FsmState.STARTUP: ControlOutputs(0, 0, 1, PITCH_STARTUP),
    FsmState.GENERATING: ControlOutputs(0, 0, 0, PITCH_REGULATED),
    FsmState.PITCH_BRAKE: ControlOutputs(0, 1, 0, PITCH_FEATHERED),
}
SAFE_OUTPUTS = STATE_OUTPUTS[FsmState.PARK_BRAKE]


@dataclass(frozen=True)
class ControllerConfig:
    v_wind_cut_in: float = 3.0
    v_wind_cut_out: float = 25.0
    w_gen_min: float = 0.7
    w_safe_max: float = 1.5
    scan_period: float = 100.0  # ms
    full_scale_wind: float = 25.0
    full_scale_rotor: float = 2.5
    # used only for the HR3 power estimate
    generator_rated_torque: float = 4.18e6
    generator_rated_speed: float = 1.267

    def __post_init__(self):
        errors = self.violations()
        if errors:
            raise ValueError("; ".join(errors))

    def violations(self) -> list[str]:
        errors = []
        if not 0 < self.v_wind_cut_in < self.v_wind_cut_out:
            errors.append(
                f"v_wind_cut_in ({self.v_wind_cut_in}) must be > 0 and < v_wind_cut_out ({self.v_wind_cut_out})"
            )
        if not 0 < self.w_gen_min < self.w_safe_max:
            errors.append(
                f"w_gen_min ({self.w_gen_min}) must be > 0 and < w_safe_max ({self.w_safe_max})"
            )
        if self.scan_period <= 0:
            errors.append("scan_period must be positive")
        if self.full_scale_wind < self.v_wind_cut_out:
            errors.append(
                f"full_scale_wind ({self.full_scale_wind}) must cover v_wind_cut_out ({self.v_wind_cut_out})"
            )
        if self.full_scale_rotor < 1.5 * self.w_safe_max:
            errors.append(
                f"full_scale_rotor ({self.full_scale_rotor}) must cover 1.5 * w_safe_max ({1.5 * self.w_safe_max})"
            )
        if self.generator_rated_torque <= 0 or self.generator_rated_speed <= 0:
            errors.append("generator rating must be positive")
        return errors


@dataclass(frozen=True)
class ProcessImage:
    analog_in: tuple[int, int] = (0, 0)
    digital_in: int = 0
    digital_out: tuple[int, int, int] = (1, 1, 1)
    holding_registers: tuple[int, ...] = (0,) * N_REGISTERS
    coils: tuple[bool, ...] = (False,) * N_COILS
    cpu_mode: CpuMode = CpuMode.RUN
    fsm_state: FsmState = FsmState.PARK_BRAKE
    pitch_setpoint: float = PITCH_FEATHERED
    v_wind: float = 0.0
    w_rotor: float = 0.0
    scan_count: int = 0

    @property
    def outputs(self) -> ControlOutputs:
        return ControlOutputs(*self.digital_out, self.pitch_setpoint)


def guard_vwind_ok(v_wind: float, cfg: ControllerConfig) -> bool:
    return cfg.v_wind_cut_in <= v_wind < cfg.v_wind_cut_out


def guard_rotation_ok(w_rotor: float, cfg: ControllerConfig) -> bool:
    return cfg.w_gen_min <= w_rotor <= cfg.w_safe_max


def fsm_step(current: FsmState, v_ok: bool, r_ok: bool, slowed: bool = False) -> tuple[FsmState, ControlOutputs]:
    """One transition of the control machine.

    ``slowed`` means the rotor has dropped below the generation minimum; it
    is only consulted in PitchBrake.  Outputs depend on the returned state
    alone.
    """
    current = FsmState(current)
    nxt = current
    if current is FsmState.PARK_BRAKE:
        if v_ok:
            nxt = FsmState.STARTUP
    elif current is FsmState.STARTUP:
        if not v_ok:
            nxt = FsmState.PITCH_BRAKE
        elif r_ok:
            nxt = FsmState.GENERATING
    elif current is FsmState.GENERATING:
        if not (v_ok and r_ok):
            nxt = FsmState.PITCH_BRAKE
    elif current is FsmState.PITCH_BRAKE:
        if slowed:
            nxt = FsmState.STARTUP if v_ok else FsmState.PARK_BRAKE
    return nxt, STATE_OUTPUTS[nxt]


def scale_analog_in(code: int, full_scale: float) -> float:
    if not isinstance(code, int) or not 0 <= code <= ANALOG_MAX:
        raise ValueError(f"analog code out of range: {code!r}")
    return code / ANALOG_MAX * full_scale


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _register(x: float) -> int:
    return min(max(_round_half_up(x), 0), 0xFFFF)


def estimate_power_kw(w_rotor: float, generator_connected: bool, cfg: ControllerConfig) -> float:
    if not generator_connected:
        return 0.0
    ratio = w_rotor / cfg.generator_rated_speed
    torque = cfg.generator_rated_torque * min(1.0, ratio * ratio)
    return torque * w_rotor / 1000.0


def scan_cycle(image: ProcessImage, cfg: ControllerConfig) -> ProcessImage:
    """Execute one PLC scan over ``image`` and return the next image."""
    v_wind = scale_analog_in(image.analog_in[0], cfg.full_scale_wind)
    w_rotor = scale_analog_in(image.analog_in[1], cfg.full_scale_rotor)
    coils = image.coils

    if image.cpu_mode is CpuMode.STOP:
        state = image.fsm_state
        outputs = SAFE_OUTPUTS
    elif coils[COIL_EMERGENCY_STOP]:
        state = FsmState.PARK_BRAKE
        outputs = SAFE_OUTPUTS
    else:
        state, outputs = fsm_step(
            image.fsm_state,
            guard_vwind_ok(v_wind, cfg),
            guard_rotation_ok(w_rotor, cfg),
            slowed=w_rotor < cfg.w_gen_min,
        )
        if coils[COIL_MANUAL_OVERRIDE]:
            outputs = ControlOutputs.from_triplet(
                coils[COIL_PARK_BRAKE], coils[COIL_PITCH_BRAKE], coils[COIL_GENERATOR_TRIP]
            )

    regs = list(image.holding_registers)
    regs[HR_STATE] = int(state)
    regs[HR_ROTOR] = _register(w_rotor * 100)
    regs[HR_WIND] = _register(v_wind * 100)
    regs[HR_POWER] = _register(estimate_power_kw(w_rotor, outputs.generator_trip == 0, cfg))
    regs[HR_FAULTS] = image.digital_in & 0x0F
    return replace(
        image,
        digital_out=outputs.triplet,
        holding_registers=tuple(regs),
        fsm_state=state,
        pitch_setpoint=outputs.pitch_setpoint,
        v_wind=v_wind,
        w_rotor=w_rotor,
        scan_count=image.scan_count + 1,
    )


# Commands submitted by protocol servers and the field bridge.  They are
# applied strictly in submission order, between scans.

@dataclass(frozen=True)
class WriteCoils:
    start: int
    values: tuple[bool, ...]
    source: str = ""


@dataclass(frozen=True)
class WriteRegisters:
    start: int
    values: tuple[int, ...]
    source: str = ""


@dataclass(frozen=True)
class SetCpuMode:
    mode: CpuMode
    source: str = ""


@dataclass(frozen=True)
class SetAnalogInputs:
    codes: tuple[int, int]


@dataclass(frozen=True)
class SetDigitalInputs:
    bits: int


class _NullEvents:
    def emit(self, source, kind, /, severity="info", **attrs):
        return None


@dataclass
class Controller:
    """Scan-loop owner.  The only writer of the process image."""

    config: ControllerConfig = field(default_factory=ControllerConfig)
    events: object = None
    image: ProcessImage = field(default_factory=ProcessImage)

    def __post_init__(self):
        if self.events is None:
            self.events = _NullEvents()
        self._queue = deque()
        self._listeners: list[Callable[[ProcessImage, ProcessImage], None]] = []

    @property
    def snapshot(self) -> ProcessImage:
        return self.image

    def subscribe(self, listener: Callable[[ProcessImage, ProcessImage], None]) -> None:
        """Call ``listener(previous, current)`` after every scan."""
        self._listeners.append(listener)

    def submit(self, command) -> None:
        self._queue.append(command)

    def submit_all(self, commands: Iterable) -> None:
        self._queue.extend(commands)

    def set_cpu_mode(self, mode: CpuMode | str, source: str = "") -> CpuMode:
        mode = CpuMode(mode)
        self.submit(SetCpuMode(mode, source))
        return mode

    @property
    def pending(self) -> int:
        return len(self._queue)

    def _apply(self, image: ProcessImage, cmd) -> ProcessImage:
        if isinstance(cmd, SetAnalogInputs):
            codes = tuple(cmd.codes)
            if len(codes) != 2 or not all(isinstance(c, int) and 0 <= c <= ANALOG_MAX for c in codes):
                self.events.emit("controller", "analog_reject", severity="warning", codes=list(codes))
                return image
            return replace(image, analog_in=codes)
        if isinstance(cmd, SetDigitalInputs):
            return replace(image, digital_in=int(cmd.bits) & 0xFF)
        if isinstance(cmd, WriteCoils):
            coils = list(image.coils)
            end = cmd.start + len(cmd.values)
            if cmd.start < 0 or end > N_COILS:
                return image
            coils[cmd.start:end] = [bool(v) for v in cmd.values]
            return replace(image, coils=tuple(coils))
        if isinstance(cmd, WriteRegisters):
            regs = list(image.holding_registers)
            end = cmd.start + len(cmd.values)
            if cmd.start < 0 or end > N_REGISTERS:
                return image
            regs[cmd.start:end] = [int(v) & 0xFFFF for v in cmd.values]
            return replace(image, holding_registers=tuple(regs))
        if isinstance(cmd, SetCpuMode):
            previous = image.cpu_mode
            changed = previous is not cmd.mode
            self.events.emit(
                "controller",
                "cpu_mode",
                previous=previous.value,
                mode=cmd.mode.value,
                changed=changed,
                requested_by=cmd.source,
            )
            if not changed:
                return image
            if cmd.mode is CpuMode.RUN:
                # resume from the safe state
                return replace(image, cpu_mode=cmd.mode, fsm_state=FsmState.PARK_BRAKE)
            return replace(image, cpu_mode=cmd.mode)
        raise TypeError(f"unknown controller command {cmd!r}")

    def scan(self) -> ProcessImage:
        image = self.image
        while self._queue:
            image = self._apply(image, self._queue.popleft())
        previous = self.image
        image = scan_cycle(image, self.config)
        if image.fsm_state != previous.fsm_state:
            self.events.emit(
                "controller",
                "fsm_transition",
                previous=previous.fsm_state.label,
                state=image.fsm_state.label,
                scan=image.scan_count,
            )
        self.image = image
        for listener in self._listeners:
            listener(previous, image)
        return image
