"""Shared scenario contract, validation reports and design serialization."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from dicode.projection import ProjectionOperator

MAX_REJECTION_RETRIES = 1000


class ScenarioError(ValueError):
    """Invalid design or malformed action for a scenario."""


@dataclass
class ValidationReport:
    ok: bool
    violations: list[str] = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.ok


@dataclass
class Transition:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    done: bool
    values: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.rewards.shape[0] != self.obs.shape[0]:
            raise ScenarioError("reward vector length must equal number of agents")


class ScenarioSpec:
    """A designable multi-agent environment family.

    Designs are numpy arrays of ``design_shape`` living in the wide domain;
    a valid design is one for which :meth:`validate` reports no violations.
    Subclasses provide dynamics through :meth:`instantiate` and :meth:`step`.
    """

    scenario_id: str = ""
    design_shape: tuple[int, ...] = ()
    n_agents: int = 1
    horizon: int = 1
    n_actions: int = 1
    obs_dim: int = 1
    state_dim: int = 1
    denoiser_kind: str = "mlp"
    operator: ProjectionOperator

    # -- designs -----------------------------------------------------------
    def _draw(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def uniform_generate(self, rng: np.random.Generator) -> np.ndarray:
        """One valid design from the uniform exploration distribution."""
        for _ in range(MAX_REJECTION_RETRIES):
            theta = self._draw(rng)
            if self.validate(theta):
                return theta
        raise ScenarioError(
            f"{self.scenario_id}: no valid design after {MAX_REJECTION_RETRIES} draws"
        )

    def uniform_batch(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.stack([self.uniform_generate(rng) for _ in range(n)])

    def validate(self, theta: np.ndarray) -> ValidationReport:
        raise NotImplementedError

    # -- dynamics ----------------------------------------------------------
    def instantiate(self, theta: np.ndarray, seed: int = 0):
        raise NotImplementedError

    def step(self, state, actions: np.ndarray):
        """Returns ``(next_state, obs, base_rewards, done)``."""
        raise NotImplementedError

    def observe(self, state) -> np.ndarray:
        raise NotImplementedError

    def critic_input(self, state) -> np.ndarray:
        raise NotImplementedError

    def potential(self, state) -> np.ndarray:
        """Per-agent shaping potential; zero unless the scenario shapes rewards."""
        return np.zeros(self.n_agents)

    def _check_actions(self, actions) -> np.ndarray:
        a = np.asarray(actions)
        if a.shape != (self.n_agents,) or not np.issubdtype(a.dtype, np.integer):
            raise ScenarioError(f"expected {self.n_agents} integer actions, got {actions!r}")
        if np.any(a < 0) or np.any(a >= self.n_actions):
            raise ScenarioError(f"actions out of range [0, {self.n_actions}): {a}")
        return a

    def params(self) -> dict[str, Any]:
        return {}


def shaped_reward(scenario: ScenarioSpec, prev_state, state, base_reward: np.ndarray) -> np.ndarray:
    """Undiscounted potential-based shaping ``r + phi(s') - phi(s)``."""
    return np.asarray(base_reward, dtype=np.float64) + scenario.potential(state) - scenario.potential(prev_state)


# ---------------------------------------------------------------------------
# Serialization


def design_to_record(theta: np.ndarray, scenario_id: str, **meta) -> str:
    arr = np.asarray(theta, dtype=np.float64)
    rec = {
        "scenario_id": scenario_id,
        "shape": list(arr.shape),
        "data": [float(v) for v in arr.ravel()],
        "meta": meta,
    }
    return json.dumps(rec, sort_keys=True)


def record_to_design(line: str) -> tuple[np.ndarray, str, dict]:
    rec = json.loads(line)
    arr = np.asarray(rec["data"], dtype=np.float64).reshape(rec["shape"])
    return arr, rec["scenario_id"], rec.get("meta", {})


def design_hash(theta: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(np.asarray(theta, dtype=np.float64)).tobytes()).hexdigest()[:16]
