"""Cooperative freeway on-ramp merging over simulated V2V broadcast."""

from .scenario import ScenarioConfig, parse_scenario, preset
from .sim import SimConfig, Simulation, run

__all__ = ["ScenarioConfig", "SimConfig", "Simulation", "parse_scenario", "preset", "run"]
__version__ = "0.1.0"
