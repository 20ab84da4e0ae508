"""Designable multi-agent scenarios and their registry."""

from dicode.envs.base import (
    MAX_REJECTION_RETRIES,
    ScenarioError,
    ScenarioSpec,
    Transition,
    ValidationReport,
    design_hash,
    design_to_record,
    record_to_design,
    shaped_reward,
)
from dicode.envs.nav import NavScenario, NavState
from dicode.envs.warehouse import WarehouseCoordScenario, WarehouseScenario, WarehouseState
from dicode.envs.wind import WindScenario, WindState, wake_deficits, wake_power
from dicode.projection import register

SCENARIOS = {
    "nav": NavScenario,
    "warehouse": WarehouseScenario,
    "warehouse-coord": WarehouseCoordScenario,
    "wind": WindScenario,
}

# Default-parameter operators; scenarios built with other parameters carry their own.
for _cls in SCENARIOS.values():
    register(_cls().operator)


def make_scenario(scenario_id: str, **params) -> ScenarioSpec:
    try:
        cls = SCENARIOS[scenario_id]
    except KeyError:
        raise ScenarioError(f"unknown scenario {scenario_id!r}; known: {sorted(SCENARIOS)}") from None
    return cls(**params)


__all__ = [
    "MAX_REJECTION_RETRIES",
    "NavScenario",
    "NavState",
    "SCENARIOS",
    "ScenarioError",
    "ScenarioSpec",
    "Transition",
    "ValidationReport",
    "WarehouseCoordScenario",
    "WarehouseScenario",
    "WarehouseState",
    "WindScenario",
    "WindState",
    "design_hash",
    "design_to_record",
    "make_scenario",
    "record_to_design",
    "shaped_reward",
    "wake_deficits",
    "wake_power",
]
