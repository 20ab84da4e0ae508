"""Nav-lite: point agents crossing an arena past designable obstacles.

Each agent spawns at a fixed point and is rewarded for progress toward a
fixed goal. Obstacles are the design; each one lives in its own local box,
so any clamped design is valid and no pairwise constraint is needed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dicode.envs.base import ScenarioError, ScenarioSpec, ValidationReport
from dicode.projection import ProjectionOperator, project_boxes

# noop, +x, -x, +y, -y
_DIRS = np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])


@dataclass(frozen=True)
class NavState:
    pos: np.ndarray  # (n_agents, 2)
    vel: np.ndarray  # (n_agents, 2)
    obstacles: np.ndarray  # (n_obstacles, 2)
    t: int = 0


class NavScenario(ScenarioSpec):
    """Two-lane crossing with obstacles confined to boxes around anchors."""

    scenario_id = "nav"
    denoiser_kind = "mlp"
    n_actions = 5

    def __init__(
        self,
        n_agents: int = 2,
        horizon: int = 64,
        lane_y: float = 0.4,
        x_span: float = 0.85,
        anchors_x: tuple[float, ...] = (-0.3, 0.3),
        box_half: float = 0.25,
        obstacle_radius: float = 0.14,
        agent_radius: float = 0.05,
        accel: float = 0.012,
        damping: float = 0.6,
    ):
        if n_agents not in (1, 2):
            raise ScenarioError("nav supports one or two agents (one per lane)")
        self.n_agents = n_agents
        self.horizon = horizon
        self.lane_y = lane_y
        self.accel = accel
        self.damping = damping
        self.obstacle_radius = obstacle_radius
        self.agent_radius = agent_radius
        lanes = [-lane_y, lane_y][:n_agents]
        # agents travel in opposite directions along their lanes
        self.starts = np.array([[-x_span, y] if i % 2 == 0 else [x_span, y] for i, y in enumerate(lanes)])
        self.goals = np.array([[x_span, y] if i % 2 == 0 else [-x_span, y] for i, y in enumerate(lanes)])
        self.anchors = np.array([[ax, y] for y in (-lane_y, lane_y) for ax in anchors_x])
        self.n_obstacles = len(self.anchors)
        self.box_half = box_half
        self.lo = np.clip(self.anchors - box_half, -1.0, 1.0)
        self.hi = np.clip(self.anchors + box_half, -1.0, 1.0)
        self.design_shape = (self.n_obstacles, 2)
        self.obs_dim = 7 + 2 * self.n_obstacles + 2 * (self.n_agents - 1)
        self.state_dim = 7 * self.n_agents + 2 * self.n_obstacles
        lo, hi = self.lo, self.hi
        self.operator = ProjectionOperator(
            scenario_id=self.scenario_id,
            project=lambda x: project_boxes(x, lo, hi),
            finalize=lambda x: project_boxes(x, lo, hi),
            is_feasible=lambda x: bool(self.validate(x)),
        )

    def params(self):
        return {
            "n_agents": self.n_agents,
            "horizon": self.horizon,
            "lane_y": self.lane_y,
            "box_half": self.box_half,
            "obstacle_radius": self.obstacle_radius,
        }

    # -- designs -----------------------------------------------------------
    def _draw(self, rng):
        return rng.uniform(self.lo, self.hi)

    def validate(self, theta) -> ValidationReport:
        x = np.asarray(theta, dtype=np.float64)
        if x.shape != self.design_shape:
            return ValidationReport(False, [f"shape {x.shape} != {self.design_shape}"])
        bad = []
        if not np.all(np.isfinite(x)):
            bad.append("non-finite coordinate")
        for i in range(self.n_obstacles):
            if np.any(x[i] < self.lo[i] - 1e-12) or np.any(x[i] > self.hi[i] + 1e-12):
                bad.append(f"obstacle {i} outside local boundary")
        return ValidationReport(not bad, bad)

    # -- dynamics ----------------------------------------------------------
    def instantiate(self, theta, seed: int = 0) -> NavState:
        rep = self.validate(theta)
        if not rep:
            raise ScenarioError(f"invalid nav design: {rep.violations}")
        return NavState(
            pos=self.starts.copy(),
            vel=np.zeros((self.n_agents, 2)),
            obstacles=np.asarray(theta, dtype=np.float64).copy(),
            t=0,
        )

    def step(self, state: NavState, actions):
        a = self._check_actions(actions)
        vel = self.damping * state.vel + self.accel * _DIRS[a]
        pos = state.pos.copy()
        reach = self.agent_radius + self.obstacle_radius
        for i in range(self.n_agents):
            p = pos[i] + vel[i]
            p = np.clip(p, -1.0 + self.agent_radius, 1.0 - self.agent_radius)
            hit = np.any(np.sum((state.obstacles - p) ** 2, axis=1) < reach**2)
            for j in range(self.n_agents):
                if j != i and np.sum((pos[j] - p) ** 2) < (2 * self.agent_radius) ** 2:
                    hit = True
            if hit:
                vel[i] = 0.0
            else:
                pos[i] = p
        d0 = np.linalg.norm(state.pos - self.goals, axis=1)
        d1 = np.linalg.norm(pos - self.goals, axis=1)
        rewards = d0 - d1
        nxt = NavState(pos=pos, vel=vel, obstacles=state.obstacles, t=state.t + 1)
        return nxt, self.observe(nxt), rewards, nxt.t >= self.horizon

    def observe(self, state: NavState) -> np.ndarray:
        tfrac = state.t / self.horizon
        rows = []
        for i in range(self.n_agents):
            parts = [
                state.pos[i],
                state.vel[i] * 10.0,
                self.goals[i] - state.pos[i],
                [tfrac],
                (state.obstacles - state.pos[i]).ravel(),
            ]
            for j in range(self.n_agents):
                if j != i:
                    parts.append(state.pos[j] - state.pos[i])
            rows.append(np.concatenate([np.asarray(p, dtype=np.float64).ravel() for p in parts]))
        return np.stack(rows)

    def critic_input(self, state: NavState) -> np.ndarray:
        return np.concatenate(
            [
                state.pos.ravel(),
                state.vel.ravel() * 10.0,
                (self.goals - state.pos).ravel(),
                np.full(self.n_agents, state.t / self.horizon),
                state.obstacles.ravel(),
            ]
        )
