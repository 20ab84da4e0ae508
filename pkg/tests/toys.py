"""Small hand-built fixtures shared by the unit and acceptance tests."""

from __future__ import annotations

import numpy as np
import torch

from dicode.diffusion import NoiseSchedule
from dicode.envs import WarehouseScenario
from dicode.envs.base import ScenarioSpec, ValidationReport
from dicode.marl import MAPPO, MarlConfig, rollout
from dicode.projection import ProjectionOperator, project_boxes


class PointMassOracle:
    """Exact noise predictor for a prior concentrated on ``x0``."""

    def __init__(self, x0: torch.Tensor, s: NoiseSchedule):
        self.x0 = x0
        self.s = s
        self.data_shape = tuple(x0.shape)

    def __call__(self, x_t: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        ab = self.s.ab(t, x_t)
        return (x_t - torch.sqrt(ab) * self.x0) / torch.sqrt(1.0 - ab)


class GaussianOracle:
    """Exact noise predictor for an isotropic Gaussian prior ``N(mu, sigma^2 I)``."""

    def __init__(self, mu: torch.Tensor, sigma: float, s: NoiseSchedule):
        self.mu, self.sigma, self.s = mu, sigma, s
        self.data_shape = tuple(mu.shape)

    def __call__(self, x_t: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        ab = self.s.ab(t, x_t)
        var = ab * self.sigma**2 + (1.0 - ab)
        score = -(x_t - torch.sqrt(ab) * self.mu) / var
        return -torch.sqrt(1.0 - ab) * score


def _bandit_op() -> ProjectionOperator:
    lo, hi = np.zeros(1), np.ones(1)
    box = lambda x: project_boxes(x, lo, hi)  # noqa: E731
    return ProjectionOperator("bandit", box, box, lambda x: bool(np.all((x >= 0) & (x <= 1))))


class BanditScenario(ScenarioSpec):
    """One agent, one step, two arms; arm 1 pays 1 and arm 0 pays 0."""

    scenario_id = "bandit"
    design_shape = (1,)
    n_agents = 1
    horizon = 1
    n_actions = 2
    obs_dim = 1
    state_dim = 1

    def __init__(self):
        self.operator = _bandit_op()

    def _draw(self, rng):
        return rng.random(1)

    def validate(self, theta):
        ok = bool(np.all((theta >= 0) & (theta <= 1)))
        return ValidationReport(ok, [] if ok else ["out of bounds"])

    def instantiate(self, theta, seed=0):
        return 0

    def step(self, state, actions):
        a = self._check_actions(actions)
        return 1, self.observe(1), np.array([float(a[0] == 1)]), True

    def observe(self, state):
        return np.ones((1, 1))

    def critic_input(self, state):
        return np.ones(1)


def easy_warehouse():
    """Default warehouse with every shelf in the top rows, next to the goals."""
    wh = WarehouseScenario()
    th = np.zeros(wh.design_shape)
    for k, (r, c) in enumerate([(0, 2), (0, 3), (1, 2), (1, 3), (0, 5), (0, 4), (1, 5), (1, 4)]):
        th[k // 4, r, c] = 1
    return wh, th


def train_bandit(seed: int, n_updates: int = 200, n_envs: int = 32) -> float:
    sc = BanditScenario()
    m = MAPPO(sc, MarlConfig(lr=1e-3, total_updates=n_updates), seed)
    rng = np.random.default_rng(seed)
    designs = sc.uniform_batch(rng, n_envs)
    for _ in range(n_updates):
        m.update(rollout(sc, designs, m.policy, m.critic, rng))
    return float(m.policy.probs(np.ones((1, 1)))[0, 1])
