"""Wind-lite: turbine layout design with yaw-controlling agents.

Power comes from an analytic top-hat (Jensen) wake model with root-sum-square
superposition and a cosine-cubed yaw loss. Yawed rotors carry less thrust
and push their wake sideways, which is what makes yaw steering useful.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dicode.envs.base import ScenarioError, ScenarioSpec, ValidationReport
from dicode.projection import (
    ProjectionOperator,
    finalize_min_distance,
    min_pairwise_distance,
    project_min_distance,
)


def wake_deficits(
    layout: np.ndarray,
    yaws: np.ndarray,
    wind_dir: float,
    ct: float = 0.8,
    k: float = 0.05,
    D: float = 1.0,
    beta: float = 0.1,
) -> np.ndarray:
    """Combined fractional velocity deficit at each turbine."""
    p = np.asarray(layout, dtype=np.float64)
    g = np.asarray(yaws, dtype=np.float64)
    w = np.array([np.cos(wind_dir), np.sin(wind_dir)])
    w_perp = np.array([-w[1], w[0]])
    rel = p[None, :, :] - p[:, None, :]  # rel[j, i] = p_i - p_j
    x = rel @ w
    y = rel @ w_perp
    cj = ct * np.cos(g) ** 2
    xs = np.maximum(x, 0.0)
    defl = (np.cos(g) ** 2 * np.sin(g) * ct / 2)[:, None] * xs / (1.0 + beta * xs / D)
    radius = D / 2 + k * xs
    inside = (x > 0) & (np.abs(y - defl) < radius)
    dv = (1.0 - np.sqrt(1.0 - cj))[:, None] / (1.0 + 2.0 * k * xs / D) ** 2
    dv = np.where(inside, dv, 0.0)
    return np.sqrt((dv**2).sum(axis=0))


def wake_power(
    layout: np.ndarray,
    yaws: np.ndarray,
    wind_speed: float,
    wind_dir: float,
    u_ref: float = 8.0,
    **wake_kw,
) -> np.ndarray:
    """Per-turbine power relative to a lone aligned turbine at ``u_ref``."""
    base = (wind_speed / u_ref) ** 3
    deficit = wake_deficits(layout, yaws, wind_dir, **wake_kw)
    return base * (1.0 - deficit) ** 3 * np.cos(np.asarray(yaws, dtype=np.float64)) ** 3


@dataclass(frozen=True)
class WindState:
    layout: np.ndarray  # (n, 2)
    yaws: np.ndarray  # (n,) radians, relative to the wind direction
    wind_speed: float
    wind_dir: float
    t: int = 0


class WindScenario(ScenarioSpec):
    """Turbines in a square box with a minimum spacing of ``d_min`` rotor diameters."""

    scenario_id = "wind"
    denoiser_kind = "mlp"
    n_actions = 3

    def __init__(
        self,
        n_turbines: int = 4,
        size: float = 8.0,
        d_min: float = 3.0,
        horizon: int = 32,
        yaw_step_deg: float = 5.0,
        max_yaw_deg: float = 30.0,
        weibull_shape: float = 2.0,
        weibull_scale: float = 8.0,
        speed_range: tuple[float, float] = (4.0, 12.0),
        dir_sector_deg: float = 15.0,
        u_ref: float = 8.0,
    ):
        self.n_agents = n_turbines
        self.size = size
        self.d_min = d_min
        self.horizon = horizon
        self.yaw_step = np.deg2rad(yaw_step_deg)
        self.max_yaw = np.deg2rad(max_yaw_deg)
        self.weibull_shape = weibull_shape
        self.weibull_scale = weibull_scale
        self.speed_range = speed_range
        self.dir_sector = np.deg2rad(dir_sector_deg)
        self.u_ref = u_ref
        self.bounds = (0.0, 0.0, size, size)
        self.design_shape = (n_turbines, 2)
        self.obs_dim = 8 + 2 * (n_turbines - 1)
        self.state_dim = 3 * n_turbines + 4
        bounds = self.bounds
        self.operator = ProjectionOperator(
            scenario_id=self.scenario_id,
            project=lambda x: project_min_distance(x, d_min, bounds=bounds),
            finalize=lambda x: finalize_min_distance(x, d_min, bounds=bounds),
            is_feasible=lambda x: bool(self.validate(x)),
        )

    def params(self):
        return {
            "n_turbines": self.n_agents,
            "size": self.size,
            "d_min": self.d_min,
            "horizon": self.horizon,
            "dir_sector_deg": float(np.rad2deg(self.dir_sector)),
        }

    # -- designs -----------------------------------------------------------
    def _draw(self, rng):
        return rng.uniform(0.0, self.size, size=self.design_shape)

    def validate(self, theta) -> ValidationReport:
        x = np.asarray(theta, dtype=np.float64)
        if x.shape != self.design_shape:
            return ValidationReport(False, [f"shape {x.shape} != {self.design_shape}"])
        bad = []
        if not np.all(np.isfinite(x)):
            return ValidationReport(False, ["non-finite coordinate"])
        for i in range(len(x)):
            if np.any(x[i] < 0.0) or np.any(x[i] > self.size):
                bad.append(f"turbine {i} outside site")
        for i in range(len(x)):
            for j in range(i + 1, len(x)):
                d = float(np.linalg.norm(x[i] - x[j]))
                if d < self.d_min:
                    bad.append(f"pair ({i},{j}) at distance {d:.4g} < {self.d_min}")
        return ValidationReport(not bad, bad)

    # -- dynamics ----------------------------------------------------------
    def draw_wind(self, rng: np.random.Generator) -> tuple[float, float]:
        speed = self.weibull_scale * rng.weibull(self.weibull_shape)
        speed = float(np.clip(speed, *self.speed_range))
        direction = float(rng.uniform(-self.dir_sector, self.dir_sector))
        return speed, direction

    def instantiate(self, theta, seed: int = 0) -> WindState:
        rep = self.validate(theta)
        if not rep:
            raise ScenarioError(f"invalid wind design: {rep.violations}")
        speed, direction = self.draw_wind(np.random.default_rng(seed))
        return WindState(
            layout=np.asarray(theta, dtype=np.float64).copy(),
            yaws=np.zeros(self.n_agents),
            wind_speed=speed,
            wind_dir=direction,
        )

    def power(self, state: WindState) -> np.ndarray:
        return wake_power(state.layout, state.yaws, state.wind_speed, state.wind_dir, u_ref=self.u_ref)

    def step(self, state: WindState, actions):
        a = self._check_actions(actions)
        yaws = np.clip(state.yaws + (a - 1) * self.yaw_step, -self.max_yaw, self.max_yaw)
        nxt = WindState(state.layout, yaws, state.wind_speed, state.wind_dir, state.t + 1)
        team = float(self.power(nxt).mean())
        rewards = np.full(self.n_agents, team)
        return nxt, self.observe(nxt), rewards, nxt.t >= self.horizon

    def observe(self, state: WindState) -> np.ndarray:
        deficit = wake_deficits(state.layout, state.yaws, state.wind_dir)
        w = np.array([np.cos(state.wind_dir), np.sin(state.wind_dir)])
        rot = np.array([w, [-w[1], w[0]]])
        rows = []
        for i in range(self.n_agents):
            others = [(rot @ (state.layout[j] - state.layout[i])) / self.size for j in range(self.n_agents) if j != i]
            rows.append(
                np.concatenate(
                    [
                        [state.wind_speed / self.u_ref, w[0], w[1], state.yaws[i] / self.max_yaw, 1.0 - deficit[i]],
                        state.layout[i] / self.size,
                        np.ravel(others),
                        [state.t / self.horizon],
                    ]
                )
            )
        return np.stack(rows)

    def critic_input(self, state: WindState) -> np.ndarray:
        return np.concatenate(
            [
                state.layout.ravel() / self.size,
                [state.wind_speed / self.u_ref, np.cos(state.wind_dir), np.sin(state.wind_dir)],
                state.yaws / self.max_yaw,
                [state.t / self.horizon],
            ]
        )

    def min_distance(self, theta) -> float:
        return min_pairwise_distance(np.asarray(theta))
