"""Single-mass drivetrain model of the turbine with latching fault detection.

The rotor is integrated with one explicit Euler step per call::

    J * dw/dt = T_aero - T_gen - T_brake

Aerodynamic torque comes from the usual analytic power-coefficient
approximation Cp(lambda, beta) with six coefficients.  Default sizing follows
a 5 MW class land-based geared machine (63 m blades, 97:1 gearbox).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from .controller import ControlOutputs, PITCH_REGULATED

BETZ_LIMIT = 0.593
OMEGA_EPS = 1e-2  # rad/s
WIND_EPS = 1e-1  # m/s
FAULT_MARGIN = 1.25
PITCH_MIN = 0.0
PITCH_MAX = 95.0

DEFAULT_CP_COEFFICIENTS = (0.5176, 116.0, 0.4, 5.0, 21.0, 0.0068)


@dataclass(frozen=True)
class FaultFlags:
    rotor: bool = False
    gearbox: bool = False
    generator: bool = False
    brake: bool = False

    def __or__(self, other: "FaultFlags") -> "FaultFlags":
        return FaultFlags(
            self.rotor or other.rotor,
            self.gearbox or other.gearbox,
            self.generator or other.generator,
            self.brake or other.brake,
        )

    @property
    def bitfield(self) -> int:
        return self.rotor | self.gearbox << 1 | self.generator << 2 | self.brake << 3

    @classmethod
    def from_bitfield(cls, bits: int) -> "FaultFlags":
        return cls(bool(bits & 1), bool(bits & 2), bool(bits & 4), bool(bits & 8))

    def names(self) -> list[str]:
        return [n for n in ("rotor", "gearbox", "generator", "brake") if getattr(self, n)]


@dataclass(frozen=True)
class PlantLimits:
    # operating maxima; faults fire strictly above FAULT_MARGIN times these
    w_rotor_max: float = 1.6  # rad/s
    gearbox_speed_max: float = 150.0  # rad/s, high-speed shaft
    power_max: float = 5300.0  # kW
    brake_engage_speed_limit: float = 0.75  # rad/s
    gearbox_ratio: float = 97.0
    rotor_inertia: float = 4.38e7  # kg m^2, rotor plus reflected generator
    rotor_radius: float = 63.0  # m
    air_density: float = 1.225  # kg/m^3
    # drivetrain and actuators
    rated_speed: float = 1.267  # rad/s
    rated_torque: float = 4.18e6  # N m, low-speed shaft
    park_brake_torque: float = 6.0e6  # N m
    pitch_brake_torque: float = 5.0e5  # N m
    pitch_rate: float = 8.0  # deg/s
    pitch_gain: float = 200.0  # deg per rad/s above rated speed
    pitch_regulation_max: float = 90.0  # deg
    cp_coefficients: tuple[float, ...] = DEFAULT_CP_COEFFICIENTS

    def __post_init__(self):
        errors = self.violations()
        if errors:
            raise ValueError("; ".join(errors))

    def violations(self) -> list[str]:
        errors = []
        for name in (
            "w_rotor_max", "gearbox_speed_max", "power_max", "brake_engage_speed_limit",
            "gearbox_ratio", "rotor_inertia", "rotor_radius", "air_density",
            "rated_speed", "rated_torque", "pitch_rate",
        ):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
                errors.append(f"{name} must be strictly positive, got {value!r}")
        if isinstance(self.gearbox_ratio, (int, float)) and self.gearbox_ratio < 1:
            errors.append(f"gearbox_ratio must be >= 1, got {self.gearbox_ratio}")
        for name in ("park_brake_torque", "pitch_brake_torque", "pitch_gain"):
            if getattr(self, name) < 0:
                errors.append(f"{name} must be non-negative")
        if len(self.cp_coefficients) != 6:
            errors.append("cp_coefficients needs exactly six values")
        return errors


@dataclass(frozen=True)
class TurbineState:
    w_rotor: float = 0.0
    pitch: float = PITCH_MAX
    generator_connected: bool = False
    power_out: float = 0.0  # kW
    faults: FaultFlags = field(default_factory=FaultFlags)
    sim_time: float = 0.0


def power_coefficient(tsr: float, pitch: float, coefficients=DEFAULT_CP_COEFFICIENTS) -> float:
    """Cp(lambda, beta), clamped to [0, Betz]."""
    c1, c2, c3, c4, c5, c6 = coefficients
    base = tsr + 0.08 * pitch
    if base <= 0:
        # limit of the expression as lambda and beta go to zero
        return min(max(c6 * tsr, 0.0), BETZ_LIMIT)
    inv = 1.0 / base - 0.035 / (pitch ** 3 + 1.0)
    if c5 * inv > 700.0:
        # exp underflows long before the polynomial overflows; the first term is zero
        return min(max(c6 * tsr, 0.0), BETZ_LIMIT)
    cp = c1 * (c2 * inv - c3 * pitch - c4) * math.exp(-c5 * inv) + c6 * tsr
    return min(max(cp, 0.0), BETZ_LIMIT)


def aero_torque(v_wind: float, w_rotor: float, pitch: float, limits: PlantLimits) -> float:
    if v_wind < 0 or w_rotor < 0:
        raise ValueError("wind and rotor speed must be non-negative")
    if v_wind == 0:
        return 0.0
    omega = max(w_rotor, OMEGA_EPS)
    # guarded speed in the tip-speed ratio keeps torque continuous down to rest
    tsr = omega * limits.rotor_radius / max(v_wind, WIND_EPS)
    cp = power_coefficient(tsr, pitch, limits.cp_coefficients)
    swept = math.pi * limits.rotor_radius ** 2
    return 0.5 * limits.air_density * swept * v_wind ** 3 * cp / omega


def generator_torque(w_rotor: float, limits: PlantLimits) -> float:
    """Quadratic below rated speed, constant rated torque above."""
    ratio = w_rotor / limits.rated_speed
    return limits.rated_torque * min(1.0, ratio * ratio)


def check_faults(state: TurbineState, controls: ControlOutputs, limits: PlantLimits) -> FaultFlags:
    w = state.w_rotor
    fresh = FaultFlags(
        rotor=w > FAULT_MARGIN * limits.w_rotor_max,
        gearbox=w * limits.gearbox_ratio > FAULT_MARGIN * limits.gearbox_speed_max,
        generator=state.power_out > FAULT_MARGIN * limits.power_max,
        brake=bool(controls.park_brake) and w > limits.brake_engage_speed_limit,
    )
    return state.faults | fresh


def pitch_target(controls: ControlOutputs, w_rotor: float, limits: PlantLimits) -> float:
    if controls.pitch_setpoint == PITCH_REGULATED:
        demand = limits.pitch_gain * (w_rotor - limits.rated_speed)
        return min(max(demand, PITCH_MIN), limits.pitch_regulation_max)
    return min(max(controls.pitch_setpoint, PITCH_MIN), PITCH_MAX)


def _finite(*values) -> bool:
    return all(math.isfinite(v) for v in values)


def step(state: TurbineState, v_wind: float, controls: ControlOutputs, dt: float, limits: PlantLimits) -> TurbineState:
    """Advance the plant by ``dt`` seconds under ``controls``."""
    if not _finite(v_wind, dt, state.w_rotor, state.pitch, controls.pitch_setpoint):
        raise ValueError("non-finite plant input")
    if not 0 < dt <= 0.5:
        raise ValueError(f"dt must be in (0, 0.5], got {dt}")
    if v_wind < 0:
        raise ValueError("wind speed must be non-negative")

    w = state.w_rotor
    connected = controls.generator_trip == 0
    t_aero = aero_torque(v_wind, w, state.pitch, limits)
    t_gen = generator_torque(w, limits) if connected else 0.0
    t_brake = limits.park_brake_torque * bool(controls.park_brake)
    t_brake += limits.pitch_brake_torque * bool(controls.pitch_brake)

    drive = t_aero - t_gen
    if w > 0 or drive > t_brake:
        w_next = w + dt * (drive - t_brake) / limits.rotor_inertia
    else:
        # brakes hold a rotor at rest
        w_next = 0.0
    w_next = max(w_next, 0.0)

    target = pitch_target(controls, w, limits)
    slew = limits.pitch_rate * dt
    pitch = state.pitch + min(max(target - state.pitch, -slew), slew)
    pitch = min(max(pitch, PITCH_MIN), PITCH_MAX)

    power = generator_torque(w_next, limits) * w_next / 1000.0 if connected else 0.0
    nxt = TurbineState(
        w_rotor=w_next,
        pitch=pitch,
        generator_connected=connected,
        power_out=power,
        faults=state.faults,
        sim_time=state.sim_time + dt,
    )
    return replace(nxt, faults=check_faults(nxt, controls, limits))
