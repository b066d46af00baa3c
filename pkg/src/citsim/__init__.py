"""Cooperative traffic management on a mesoscopic network simulator."""

from citsim.engine import Engine
from citsim.scenario import Scenario, load_scenario, resolve_scenario

__version__ = "0.1.0"

__all__ = ["Engine", "Scenario", "load_scenario", "resolve_scenario", "__version__"]
