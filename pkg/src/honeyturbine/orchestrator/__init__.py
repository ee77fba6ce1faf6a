"""Configuration, scenario lifecycle and run reporting."""

from .config import ConfigError, ScenarioConfig, load_config, parse_config
from .report import Report, build_report
from .scenario import Honeynet, run_scenario

__all__ = [
    "ConfigError",
    "Honeynet",
    "Report",
    "ScenarioConfig",
    "build_report",
    "load_config",
    "parse_config",
    "run_scenario",
]
