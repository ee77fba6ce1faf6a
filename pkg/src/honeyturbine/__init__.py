"""Software wind-turbine honeynet: plant model, PLC runtime, decoy ICS services."""

__version__ = "0.1.0"
