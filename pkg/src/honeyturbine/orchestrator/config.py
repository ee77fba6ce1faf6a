"""Scenario configuration: one YAML file, validated before anything binds.

Unknown keys are errors.  All violations are collected and reported
together, each prefixed with its dotted key path.
"""

from __future__ import annotations

import dataclasses
import math
import types
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..controller import ControllerConfig
from ..plant import PlantLimits
from ..s7lite import DeviceIdentity
from ..windsource import GeoPoint


class ConfigError(ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.violations))


@dataclass(frozen=True)
class WindConfig:
    mode: str = "replay"  # replay | live
    profile: str | None = None
    constant: float = 0.0  # used when no profile file is given
    sigma: float = 0.5
    latitude: float = 40.84
    longitude: float = 14.25
    altitude: float = 50.0
    endpoint: str = "https://api.open-meteo.com/v1/forecast"
    field_path: str = "current.wind_speed_80m"
    params: dict = field(default_factory=lambda: {"current": "wind_speed_80m", "wind_speed_unit": "ms"})
    fetch_period: float = 60.0

    def violations(self) -> list[str]:
        errors = []
        if self.mode not in ("replay", "live"):
            errors.append(f"mode must be 'replay' or 'live', got {self.mode!r}")
        if self.sigma < 0:
            errors.append("sigma must be non-negative")
        if self.constant < 0:
            errors.append("constant must be non-negative")
        if self.fetch_period <= 0:
            errors.append("fetch_period must be positive")
        try:
            GeoPoint(self.latitude, self.longitude)
        except ValueError as exc:
            errors.append(str(exc))
        return errors


@dataclass(frozen=True)
class NetworkConfig:
    bind: str = "0.0.0.0"
    services_host: str = "127.0.0.1"
    expose: dict = field(default_factory=lambda: {"web": 80, "s7": 102, "modbus": 502})
    services: dict = field(default_factory=lambda: {"web": 0, "s7": 0, "modbus": 0})
    extra: dict = field(default_factory=dict)  # name -> {listen, upstream_host, upstream_port}
    fieldbus: str = "udp"  # udp | loopback
    telemetry_port: int = 46001
    control_port: int = 46002

    def violations(self) -> list[str]:
        errors = []
        for group in ("expose", "services"):
            table = getattr(self, group)
            unknown = set(table) - {"web", "s7", "modbus"}
            if unknown:
                errors.append(f"{group} has unknown services {sorted(unknown)}")
            for name, port in table.items():
                if not isinstance(port, int) or not 0 <= port <= 65535:
                    errors.append(f"{group}.{name} port {port!r} must be an integer in 0..65535")
        for name, spec in self.extra.items():
            if not isinstance(spec, dict) or set(spec) != {"listen", "upstream_host", "upstream_port"}:
                errors.append(f"extra.{name} needs exactly listen, upstream_host, upstream_port")
        if self.fieldbus not in ("udp", "loopback"):
            errors.append(f"fieldbus must be 'udp' or 'loopback', got {self.fieldbus!r}")
        bindings: dict[int, list[str]] = {}
        for name, port in self.expose.items():
            bindings.setdefault(port, []).append(f"expose.{name}")
        for name, port in self.services.items():
            bindings.setdefault(port, []).append(f"services.{name}")
        for name, spec in self.extra.items():
            if isinstance(spec, dict) and "listen" in spec:
                bindings.setdefault(spec["listen"], []).append(f"extra.{name}")
        if self.fieldbus == "udp":
            # UDP ports live in their own namespace
            if self.telemetry_port and self.telemetry_port == self.control_port:
                errors.append(f"telemetry_port and control_port both use port {self.telemetry_port}")
        for port, users in sorted(bindings.items(), key=lambda kv: str(kv[0])):
            if port and len(users) > 1:
                errors.append(f"port {port} bound by more than one service: {', '.join(users)}")
        return errors


@dataclass(frozen=True)
class ScenarioConfig:
    plant: PlantLimits = field(default_factory=PlantLimits)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    wind: WindConfig = field(default_factory=WindConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    identity: DeviceIdentity = field(default_factory=DeviceIdentity)
    seed: int = 0
    duration: float = 60.0  # simulated seconds; 0 runs until interrupted
    time_scale: float = 1.0  # simulated seconds per wall second; 0 = free-running
    plant_dt: float = 0.05
    writable_registers: tuple = (5, 15)
    adc_noise: float = 0.0  # volts, 1 sigma
    source_path: str | None = None

    @property
    def steps_per_scan(self) -> int:
        return max(1, round(self.controller.scan_period / 1000.0 / self.plant_dt))

    def profile_path(self) -> Path | None:
        if not self.wind.profile:
            return None
        path = Path(self.wind.profile)
        if not path.is_absolute() and self.source_path:
            path = Path(self.source_path).parent / path
        return path


_SECTIONS = {
    "plant": PlantLimits,
    "controller": ControllerConfig,
    "wind": WindConfig,
    "network": NetworkConfig,
    "identity": DeviceIdentity,
}
_SCALARS = {
    "seed": int,
    "duration": float,
    "time_scale": float,
    "plant_dt": float,
    "writable_registers": tuple,
    "adc_noise": float,
}


def _coerce(value, default, path: str, errors: list):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            errors.append(f"{path} must be true/false")
        return value
    if isinstance(default, float) or (isinstance(default, int) and not isinstance(default, bool)):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            errors.append(f"{path} must be a number, got {value!r}")
            return default
        if isinstance(default, float):
            value = float(value)
            if not math.isfinite(value):
                errors.append(f"{path} must be finite")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            errors.append(f"{path} must be a list")
            return default
        return tuple(value)
    if isinstance(default, dict):
        if not isinstance(value, dict):
            errors.append(f"{path} must be a mapping")
            return default
        return dict(value)
    if isinstance(default, str) or default is None:
        if value is not None and not isinstance(value, str):
            errors.append(f"{path} must be a string")
            return default
    return value


def _section(raw, cls, path: str, errors: list):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        errors.append(f"{path} must be a mapping")
        return cls()
    fields = {f.name: f for f in dataclasses.fields(cls)}
    values = {}
    for key, value in raw.items():
        if key not in fields:
            errors.append(f"{path}.{key}: unknown key")
            continue
        f = fields[key]
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        values[key] = _coerce(value, default, f"{path}.{key}", errors)
    merged = {name: (values[name] if name in values else
                     (f.default if f.default is not dataclasses.MISSING else f.default_factory()))
              for name, f in fields.items()}
    check = getattr(cls, "violations", None)
    if check is not None:
        problems = check(types.SimpleNamespace(**merged))
        errors.extend(f"{path}: {p}" for p in problems)
        if problems:
            return None
    try:
        return cls(**values)
    except (ValueError, TypeError) as exc:
        errors.append(f"{path}: {exc}")
        return None


def parse_config(doc, source_path: str | None = None) -> ScenarioConfig:
    errors: list[str] = []
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(["top level must be a mapping"])
    kwargs = {}
    for key, value in doc.items():
        if key in _SECTIONS:
            kwargs[key] = _section(value, _SECTIONS[key], key, errors)
        elif key in _SCALARS:
            default = getattr(ScenarioConfig, key)
            kwargs[key] = _coerce(value, default, key, errors)
        else:
            errors.append(f"{key}: unknown key")
    cfg_defaults = ScenarioConfig()
    seed = kwargs.get("seed", cfg_defaults.seed)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        errors.append("seed must be a non-negative integer")
    if kwargs.get("duration", 0.0) < 0:
        errors.append("duration must be >= 0")
    if kwargs.get("time_scale", 1.0) < 0:
        errors.append("time_scale must be >= 0 (0 = free-running)")
    dt = kwargs.get("plant_dt", cfg_defaults.plant_dt)
    if not 0 < dt <= 0.5:
        errors.append(f"plant_dt must be in (0, 0.5], got {dt}")
    window = kwargs.get("writable_registers", (5, 15))
    if len(window) != 2 or not all(isinstance(x, int) for x in window) or not 0 <= window[0] <= window[1] <= 15:
        errors.append(f"writable_registers must be [lo, hi] within 0..15, got {list(window)}")
    elif window[0] < 5:
        errors.append("writable_registers must not include controller-owned HR0..HR4")
    if kwargs.get("adc_noise", 0.0) < 0:
        errors.append("adc_noise must be >= 0")
    if errors:
        raise ConfigError(errors)
    cfg = ScenarioConfig(**kwargs, source_path=source_path)
    if cfg.wind.mode == "replay" and cfg.wind.profile:
        path = cfg.profile_path()
        if not path.is_file():
            raise ConfigError([f"wind.profile: file not found: {path}"])
    return cfg


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError([f"config file not found: {path}"]) from None
    except OSError as exc:
        raise ConfigError([f"cannot read {path}: {exc}"]) from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"{path}: not valid YAML: {exc}"]) from None
    return parse_config(doc, source_path=str(path))
