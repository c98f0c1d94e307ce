"""Discrete-event simulator and controller for a shared sensor network."""
from .errors import SSNError
from .proto import AppKind, AppConfig, Schedule, build_schedule, decode_frame, encode_frame
from .sim import Simulation, load_scenario, parse_scenario, run_scenario

__version__ = "0.1.0"

__all__ = [
    "SSNError", "AppKind", "AppConfig", "Schedule", "build_schedule", "decode_frame",
    "encode_frame", "Simulation", "load_scenario", "parse_scenario", "run_scenario",
]
