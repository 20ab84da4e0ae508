"""Warehouse-lite: a small gridworld delivery task with designable shelves.

Robots pick up requested boxes from coloured shelves, deliver them to a goal
of the same colour for +1, and return the emptied box to a free shelf of that
colour. Shelves do not block movement; robots block each other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dicode.envs.base import ScenarioError, ScenarioSpec, ValidationReport
from dicode.projection import (
    ProjectionError,
    ProjectionOperator,
    finalize_coordinate_snap,
    project_binary_topk,
    project_coordinate_snap,
)

NOOP, UP, DOWN, LEFT, RIGHT, TOGGLE = range(6)
_MOVES = {UP: (-1, 0), DOWN: (1, 0), LEFT: (0, -1), RIGHT: (0, 1)}
CROP = 5


@dataclass
class WarehouseState:
    shelf_color: np.ndarray  # (H, W) int, -1 where there is no shelf
    box: np.ndarray  # (H, W) bool, a box sits on the shelf
    requested: np.ndarray  # (H, W) bool, that box is requested
    pos: np.ndarray  # (n_agents, 2) int rows/cols
    carry: np.ndarray  # (n_agents,) int colour of carried box, -1 if none
    carry_req: np.ndarray  # (n_agents,) bool
    seed: int = 0
    deliveries: int = 0
    t: int = 0

    def copy(self) -> "WarehouseState":
        return WarehouseState(
            self.shelf_color.copy(),
            self.box.copy(),
            self.requested.copy(),
            self.pos.copy(),
            self.carry.copy(),
            self.carry_req.copy(),
            self.seed,
            self.deliveries,
            self.t,
        )

    def n_boxes(self) -> int:
        return int(self.box.sum() + (self.carry >= 0).sum())


def _default_goals(H: int, W: int) -> list[tuple[int, int, int]]:
    return [(0, 0, 0), (H - 1, 0, 0), (0, W - 1, 1), (H - 1, W - 1, 1)]


class WarehouseScenario(ScenarioSpec):
    """Shelf-mask design: a binary ``(colors, H, W)`` grid with fixed counts per colour."""

    scenario_id = "warehouse"
    denoiser_kind = "conv"
    n_actions = 6

    def __init__(
        self,
        size: int = 8,
        n_agents: int = 2,
        shelves_per_color: tuple[int, ...] = (4, 4),
        goals: list[tuple[int, int, int]] | None = None,
        starts: list[tuple[int, int]] | None = None,
        n_requests: int = 2,
        horizon: int = 128,
        c_pick: float = 0.5,
        c_dist: float = 0.05,
        c_empty: float = 0.1,
        shaping: bool = True,
    ):
        self.H = self.W = size
        self.n_agents = n_agents
        self.counts = tuple(int(c) for c in shelves_per_color)
        self.n_colors = len(self.counts)
        self.goals = list(goals) if goals is not None else _default_goals(size, size)
        if starts is None:
            mid = size // 2
            starts = [(mid - 1 + (i % 2), mid - 1 + (i % 2) + 2 * (i // 2)) for i in range(n_agents)]
        if len(starts) != n_agents:
            raise ScenarioError("one start cell per agent required")
        self.starts = np.array(starts, dtype=int)
        self.n_requests = n_requests
        self.horizon = horizon
        self.c_pick, self.c_dist, self.c_empty = c_pick, c_dist, c_empty
        self.shaping = shaping

        self.goal_color = -np.ones((size, size), dtype=int)
        for r, c, col in self.goals:
            self.goal_color[r, c] = col
        self.forbidden = self.goal_color >= 0
        if sum(self.counts) > int((~self.forbidden).sum()):
            raise ScenarioError("more shelves than free cells")
        self.goal_cells = {
            col: np.array([(r, c) for r, c, g in self.goals if g == col], dtype=int) for col in range(self.n_colors)
        }
        self.mask_shape = (self.n_colors, size, size)
        self.design_shape = self.mask_shape
        self.obs_dim = 2 + 2 + self.n_colors + 4 + 3 * CROP * CROP + 1
        hw = size * size
        self.state_dim = (self.n_colors + 3) * hw + n_agents * (4 + self.n_colors) + 1
        counts, forbidden = self.counts, self.forbidden
        self.operator = ProjectionOperator(
            scenario_id=self.scenario_id,
            project=lambda x: project_binary_topk(x, counts, forbidden),
            finalize=lambda x: project_binary_topk(x, counts, forbidden),
            is_feasible=lambda x: bool(self.validate(x)),
        )

    def params(self):
        return {
            "size": self.H,
            "n_agents": self.n_agents,
            "shelves_per_color": list(self.counts),
            "goals": [list(g) for g in self.goals],
            "n_requests": self.n_requests,
            "horizon": self.horizon,
            "shaping": self.shaping,
        }

    # -- designs -----------------------------------------------------------
    def free_cells(self) -> np.ndarray:
        return np.flatnonzero(~self.forbidden.ravel())

    def _draw(self, rng):
        cells = rng.permutation(self.free_cells())[: sum(self.counts)]
        out = np.zeros(self.mask_shape)
        flat = out.reshape(self.n_colors, -1)
        k = 0
        for col, n in enumerate(self.counts):
            flat[col, cells[k : k + n]] = 1.0
            k += n
        return out

    def validate(self, theta) -> ValidationReport:
        x = np.asarray(theta, dtype=np.float64)
        if x.shape != self.design_shape:
            return ValidationReport(False, [f"shape {x.shape} != {self.design_shape}"])
        return self._validate_mask(x)

    def _validate_mask(self, x: np.ndarray) -> ValidationReport:
        bad = []
        if not np.all((x == 0.0) | (x == 1.0)):
            bad.append("non-binary entries")
        occ = x.sum(axis=0)
        for r, c in zip(*np.nonzero(occ > 1)):
            bad.append(f"cell conflict at ({r},{c})")
        for col, n in enumerate(self.counts):
            got = int(round(x[col].sum()))
            if got != n:
                bad.append(f"colour {col} has {got} shelves, expected {n}")
        for r, c in zip(*np.nonzero((occ > 0) & self.forbidden)):
            bad.append(f"shelf on goal cell ({r},{c})")
        return ValidationReport(not bad, bad)

    def to_color_grid(self, theta) -> np.ndarray:
        x = np.asarray(theta)
        grid = -np.ones((self.H, self.W), dtype=int)
        for col in range(self.n_colors):
            grid[x[col] > 0.5] = col
        return grid

    # -- dynamics ----------------------------------------------------------
    def instantiate(self, theta, seed: int = 0) -> WarehouseState:
        rep = self.validate(theta)
        if not rep:
            raise ScenarioError(f"invalid warehouse design: {rep.violations}")
        return self._instantiate_mask(theta, seed)

    def _instantiate_mask(self, theta, seed: int) -> WarehouseState:
        shelf = self.to_color_grid(theta)
        box = shelf >= 0
        requested = np.zeros_like(box)
        rng = np.random.default_rng(seed)
        cells = np.flatnonzero(box.ravel())
        pick = rng.choice(cells, size=min(self.n_requests, len(cells)), replace=False)
        requested.ravel()[pick] = True
        return WarehouseState(
            shelf_color=shelf,
            box=box,
            requested=requested,
            pos=self.starts.copy(),
            carry=-np.ones(self.n_agents, dtype=int),
            carry_req=np.zeros(self.n_agents, dtype=bool),
            seed=int(seed),
        )

    def _new_request(self, st: WarehouseState) -> None:
        cand = np.flatnonzero((st.box & ~st.requested).ravel())
        if len(cand) == 0:
            return
        rng = np.random.default_rng([st.seed, st.deliveries])
        st.requested.ravel()[rng.choice(cand)] = True

    def step(self, state: WarehouseState, actions):
        a = self._check_actions(actions)
        st = state.copy()
        rewards = np.zeros(self.n_agents)
        for i in range(self.n_agents):
            if a[i] in _MOVES:
                dr, dc = _MOVES[a[i]]
                r, c = st.pos[i, 0] + dr, st.pos[i, 1] + dc
                if not (0 <= r < self.H and 0 <= c < self.W):
                    continue
                if any(j != i and st.pos[j, 0] == r and st.pos[j, 1] == c for j in range(self.n_agents)):
                    continue
                st.pos[i] = (r, c)
            elif a[i] == TOGGLE:
                r, c = st.pos[i]
                if st.carry[i] < 0:
                    if st.requested[r, c]:
                        st.carry[i] = st.shelf_color[r, c]
                        st.carry_req[i] = True
                        st.box[r, c] = False
                        st.requested[r, c] = False
                elif st.carry_req[i]:
                    if self.goal_color[r, c] == st.carry[i]:
                        st.carry_req[i] = False
                        rewards[i] += 1.0
                        st.deliveries += 1
                        self._new_request(st)
                elif st.shelf_color[r, c] == st.carry[i] and not st.box[r, c]:
                    st.box[r, c] = True
                    st.carry[i] = -1
        st.t += 1
        return st, self.observe(st), rewards, st.t >= self.horizon

    def potential(self, state: WarehouseState) -> np.ndarray:
        if not self.shaping:
            return np.zeros(self.n_agents)
        phi = np.zeros(self.n_agents)
        for i in range(self.n_agents):
            if state.carry[i] < 0:
                continue
            if state.carry_req[i]:
                d = np.abs(self.goal_cells[state.carry[i]] - state.pos[i]).sum(1).min()
                phi[i] = self.c_pick - self.c_dist * d
            else:
                phi[i] = -self.c_empty
        return phi

    # -- observations ------------------------------------------------------
    def _nearest(self, cells: np.ndarray, p: np.ndarray):
        if len(cells) == 0:
            return None
        d = np.abs(cells - p).sum(1)
        return cells[int(np.argmin(d))]

    def target(self, state: WarehouseState, i: int):
        """The cell agent ``i`` should head for next, or None."""
        p = state.pos[i]
        if state.carry[i] < 0:
            cells = np.argwhere(state.requested)
        elif state.carry_req[i]:
            cells = self.goal_cells[state.carry[i]]
        else:
            cells = np.argwhere((state.shelf_color == state.carry[i]) & ~state.box)
        return self._nearest(cells, p)

    def observe(self, state: WarehouseState) -> np.ndarray:
        H, W, h = self.H, self.W, CROP // 2
        scale = max(H, W) - 1
        agent_map = np.zeros((H + 2 * h, W + 2 * h))
        wall_map = np.ones((H + 2 * h, W + 2 * h))
        wall_map[h : h + H, h : h + W] = 0.0
        req_map = np.zeros((H + 2 * h, W + 2 * h))
        req_map[h : h + H, h : h + W] = state.requested
        for r, c in state.pos:
            agent_map[r + h, c + h] = 1.0
        rows = []
        for i in range(self.n_agents):
            r, c = state.pos[i]
            color = np.zeros(self.n_colors)
            if state.carry[i] >= 0:
                color[state.carry[i]] = 1.0
            tgt = self.target(state, i)
            if tgt is None:
                tvec = np.zeros(4)
            else:
                dr, dc = (tgt - state.pos[i]) / scale
                tvec = np.array([dr, dc, float(dr == 0 and dc == 0), 1.0])
            own = agent_map[r : r + CROP, c : c + CROP].copy()
            own[h, h] = 0.0
            rows.append(
                np.concatenate(
                    [
                        [r / scale, c / scale],
                        [float(state.carry_req[i]), float(state.carry[i] >= 0 and not state.carry_req[i])],
                        color,
                        tvec,
                        own.ravel(),
                        wall_map[r : r + CROP, c : c + CROP].ravel(),
                        req_map[r : r + CROP, c : c + CROP].ravel(),
                        [state.t / self.horizon],
                    ]
                )
            )
        return np.stack(rows)

    def critic_input(self, state: WarehouseState) -> np.ndarray:
        onehot = np.stack([(state.shelf_color == col) for col in range(self.n_colors)]).astype(np.float64)
        agents = np.zeros((self.H, self.W))
        for r, c in state.pos:
            agents[r, c] = 1.0
        status = []
        scale = max(self.H, self.W) - 1
        for i in range(self.n_agents):
            color = np.zeros(self.n_colors)
            if state.carry[i] >= 0:
                color[state.carry[i]] = 1.0
            status.append(
                np.concatenate(
                    [state.pos[i] / scale, [float(state.carry_req[i]), float(state.carry[i] >= 0)], color]
                )
            )
        return np.concatenate(
            [
                onehot.ravel(),
                state.box.ravel().astype(np.float64),
                state.requested.ravel().astype(np.float64),
                agents.ravel(),
                np.concatenate(status),
                [state.t / self.horizon],
            ]
        )

    def heuristic_actions(self, state: WarehouseState) -> np.ndarray:
        """Greedy scripted policy: walk to the current target, then toggle."""
        acts = np.zeros(self.n_agents, dtype=int)
        for i in range(self.n_agents):
            tgt = self.target(state, i)
            if tgt is None:
                continue
            dr, dc = tgt - state.pos[i]
            if dr == 0 and dc == 0:
                acts[i] = TOGGLE
            elif dr != 0:
                acts[i] = DOWN if dr > 0 else UP
            else:
                acts[i] = RIGHT if dc > 0 else LEFT
        return acts

    # -- design statistics -------------------------------------------------
    def same_color_adjacency(self, theta, radius: int = 2) -> int:
        """Number of shelves within Manhattan ``radius`` of a goal of their colour."""
        grid = self.to_color_grid(theta)
        n = 0
        for r, c in np.argwhere(grid >= 0):
            g = self.goal_cells[grid[r, c]]
            if np.abs(g - (r, c)).sum(1).min() <= radius:
                n += 1
        return n


class WarehouseCoordScenario(WarehouseScenario):
    """Coordinate design: one ``(row, col, colour)`` row per shelf.

    Positions are snapped to distinct free cells; colours are projected onto
    the required multiset by rank, which is the exact Euclidean projection.
    """

    scenario_id = "warehouse-coord"
    denoiser_kind = "mlp"

    def __init__(self, **kw):
        super().__init__(**kw)
        self.n_shelves = sum(self.counts)
        self.design_shape = (self.n_shelves, 3)
        self.color_labels = np.repeat(np.arange(self.n_colors), self.counts).astype(np.float64)
        self.operator = ProjectionOperator(
            scenario_id=self.scenario_id,
            project=self.project,
            finalize=self.finalize,
            is_feasible=lambda x: bool(self.validate(x)),
        )

    def _project_colors(self, col: np.ndarray) -> np.ndarray:
        out = np.empty_like(col)
        out[np.argsort(col, kind="stable")] = self.color_labels
        return out

    def project(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = project_coordinate_snap(x, (self.H, self.W), forbidden=self.forbidden)
        out[:, 2] = self._project_colors(x[:, 2])
        return out

    def finalize(self, x) -> np.ndarray:
        x = self.project(x)
        try:
            return finalize_coordinate_snap(x)
        except ProjectionError:
            # a mid-chain snap can leave ties; a second pass resolves them
            return finalize_coordinate_snap(self.project(np.floor(x + 0.5)))

    def to_mask(self, theta) -> np.ndarray:
        x = np.asarray(theta)
        out = np.zeros((self.n_colors, self.H, self.W))
        for r, c, col in np.rint(x).astype(int):
            out[col, r, c] = 1.0
        return out

    def from_mask(self, mask) -> np.ndarray:
        rows = []
        for col in range(self.n_colors):
            for r, c in np.argwhere(np.asarray(mask)[col] > 0.5):
                rows.append((r, c, col))
        return np.array(rows, dtype=np.float64)

    def _draw(self, rng):
        return self.from_mask(super()._draw(rng))

    def validate(self, theta) -> ValidationReport:
        x = np.asarray(theta, dtype=np.float64)
        if x.shape != self.design_shape:
            return ValidationReport(False, [f"shape {x.shape} != {self.design_shape}"])
        bad = []
        if not np.all(x == np.rint(x)):
            bad.append("non-integer coordinates")
            return ValidationReport(False, bad)
        if np.any(x[:, 0] < 0) or np.any(x[:, 0] >= self.H) or np.any(x[:, 1] < 0) or np.any(x[:, 1] >= self.W):
            bad.append("shelf outside grid")
            return ValidationReport(False, bad)
        if np.any(x[:, 2] < 0) or np.any(x[:, 2] >= self.n_colors):
            bad.append("unknown colour")
            return ValidationReport(False, bad)
        cells = [tuple(r) for r in x[:, :2].astype(int)]
        seen = set()
        for cell in cells:
            if cell in seen:
                bad.append(f"cell conflict at {cell}")
            seen.add(cell)
        bad += [v for v in self._validate_mask(self.to_mask(x)).violations if not v.startswith("cell conflict")]
        return ValidationReport(not bad, bad)

    def instantiate(self, theta, seed: int = 0) -> WarehouseState:
        rep = self.validate(theta)
        if not rep:
            raise ScenarioError(f"invalid warehouse design: {rep.violations}")
        return self._instantiate_mask(self.to_mask(theta), seed)

    def same_color_adjacency(self, theta, radius: int = 2) -> int:
        return super().same_color_adjacency(self.to_mask(theta), radius)
