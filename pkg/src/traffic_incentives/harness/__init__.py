"""Scenario handling, verification oracles, experiment drivers and the command line."""
from .scenario import Scenario, ScenarioError, generate_scenario, load_scenario, scenario_from_dict, small_scenario

__all__ = ["Scenario", "ScenarioError", "generate_scenario", "load_scenario", "scenario_from_dict", "small_scenario"]
