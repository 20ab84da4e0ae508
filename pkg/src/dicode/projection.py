"""Projection operators from the wide diffusion domain onto valid designs.

Each operator has a soft ``project`` (idempotent, identity on valid designs)
used inside guided sampling and an exact ``finalize`` applied once at the end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np


class ProjectionError(ValueError):
    """Raised when a projection cannot produce a feasible design."""


# ---------------------------------------------------------------------------
# Binary top-k masks


def project_binary_topk(
    x: np.ndarray, counts: Sequence[int], forbidden: Optional[np.ndarray] = None
) -> np.ndarray:
    """Keep the ``counts[c]`` highest cells of channel ``c`` as ones.

    Cells are claimed in global descending value order (ties: lowest cell
    index, then lowest channel), so a cell wanted by two channels goes to the
    higher value and the loser refills from its next-ranked cell.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2:
        raise ValueError("expected a (C, ...) grid")
    C = x.shape[0]
    if len(counts) != C:
        raise ValueError(f"{len(counts)} counts for {C} channels")
    flat = x.reshape(C, -1)
    n_cells = flat.shape[1]
    allowed = np.ones(n_cells, bool) if forbidden is None else ~np.asarray(forbidden, bool).reshape(-1)
    if sum(counts) > allowed.sum():
        raise ProjectionError(f"need {sum(counts)} cells but only {int(allowed.sum())} are available")

    chan, cell = np.meshgrid(np.arange(C), np.arange(n_cells), indexing="ij")
    vals, chan, cell = flat.ravel(), chan.ravel(), cell.ravel()
    keep = allowed[cell]
    vals, chan, cell = vals[keep], chan[keep], cell[keep]
    # lexsort: last key is primary
    order = np.lexsort((chan, cell, -vals))

    out = np.zeros_like(flat)
    need = np.array(counts, dtype=int)
    taken = np.zeros(n_cells, bool)
    for i in order:
        c, k = chan[i], cell[i]
        if need[c] > 0 and not taken[k]:
            out[c, k] = 1.0
            taken[k] = True
            need[c] -= 1
            if not need.any():
                break
    return out.reshape(x.shape)


# ---------------------------------------------------------------------------
# Assignment


def linear_assignment(cost: np.ndarray) -> np.ndarray:
    """Min-cost assignment of each row to a distinct column (rows <= columns).

    Shortest augmenting path Hungarian method with dual potentials, O(n^2 m).
    Returns ``col`` with ``col[i]`` the column matched to row ``i``.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a matrix")
    n, m = cost.shape
    if n > m:
        raise ValueError(f"more rows ({n}) than columns ({m})")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    if n == 0:
        return np.zeros(0, dtype=int)

    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=int)  # p[j]: row (1-based) matched to column j; 0 = free
    way = np.zeros(m + 1, dtype=int)
    a = np.zeros((n + 1, m + 1))
    a[1:, 1:] = cost
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cur = a[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            cand = np.where(free, minv, np.inf)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col = np.empty(n, dtype=int)
    for j in range(1, m + 1):
        if p[j]:
            col[p[j] - 1] = j - 1
    return col


def assignment(cost: np.ndarray) -> np.ndarray:
    """Optimal permutation for a square cost matrix (``perm[i]`` = column of row ``i``)."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost must be square, got shape {cost.shape}")
    return linear_assignment(cost)


# ---------------------------------------------------------------------------
# Coordinate snapping


def _cell_centers(grid: tuple[int, int]) -> np.ndarray:
    H, W = grid
    ii, jj = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    return np.stack([ii.ravel(), jj.ravel()], axis=1).astype(np.float64)


def _strictly_nearest(p: np.ndarray, target: np.ndarray, margin: float) -> bool:
    # Nearest lattice centre under the Euclidean metric is per-axis rounding, so
    # strict nearness reduces to each axis offset staying inside the half cell.
    return bool(np.all(np.abs(p - target) < 0.5 - margin))


def project_coordinate_snap(
    x: np.ndarray,
    grid: tuple[int, int],
    forbidden: Optional[np.ndarray] = None,
    tol: float = 1e-6,
    margin: float = 1e-9,
) -> np.ndarray:
    """Move ``(u, v, color)`` entities just far enough to own distinct cells.

    Entities are clamped to the grid's bounding box, matched to cells by
    Manhattan-cost assignment, then each slides along the segment to its cell
    centre by the smallest fraction that makes that cell strictly nearest.
    """
    x = np.asarray(x, dtype=np.float64)
    H, W = grid
    pos = x[:, :2].copy()
    pos[:, 0] = np.clip(pos[:, 0], 0, H - 1)
    pos[:, 1] = np.clip(pos[:, 1], 0, W - 1)
    centers = _cell_centers(grid)
    if forbidden is not None:
        centers = centers[~np.asarray(forbidden, bool).reshape(-1)]
    if len(pos) > len(centers):
        raise ProjectionError(f"{len(pos)} entities but only {len(centers)} cells")

    cost = np.abs(pos[:, None, :] - centers[None, :, :]).sum(-1)
    match = centers[linear_assignment(cost)]

    out = x.copy()
    for i, (p, c) in enumerate(zip(pos, match)):
        if _strictly_nearest(p, c, margin):
            out[i, :2] = p
            continue
        lo, hi = 0.0, 1.0
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            if _strictly_nearest(p + mid * (c - p), c, margin):
                hi = mid
            else:
                lo = mid
        out[i, :2] = p + hi * (c - p)
    return out


def finalize_coordinate_snap(x: np.ndarray) -> np.ndarray:
    """Snap each entity to its nearest cell; fails when two entities collide."""
    x = np.asarray(x, dtype=np.float64)
    out = x.copy()
    out[:, :2] = np.floor(x[:, :2] + 0.5)
    cells = [tuple(r) for r in out[:, :2].astype(int)]
    if len(set(cells)) != len(cells):
        raise ProjectionError("two entities share a nearest cell; project before finalizing")
    return out


# ---------------------------------------------------------------------------
# Minimum separation


Bounds = Optional[tuple[float, float, float, float]]  # (xmin, ymin, xmax, ymax)


def hex_capacity(d_min: float, bounds: tuple[float, float, float, float]) -> int:
    """Points a hexagonal lattice of spacing ``d_min`` fits in the box (sufficient condition)."""
    w = bounds[2] - bounds[0]
    h = bounds[3] - bounds[1]
    rows = int(math.floor(h / (d_min * math.sqrt(3) / 2) + 1e-12)) + 1
    per_row = int(math.floor(w / d_min + 1e-12)) + 1
    short = int(math.floor((w - d_min / 2) / d_min + 1e-12)) + 1 if w >= d_min / 2 else 0
    return sum(per_row if r % 2 == 0 else short for r in range(rows))


def _check_packing(n: int, d_min: float, bounds: Bounds) -> None:
    if d_min <= 0:
        raise ValueError("d_min must be positive")
    if bounds is not None and n > hex_capacity(d_min, bounds):
        raise ProjectionError(f"{n} points do not fit with separation {d_min} in {bounds}")


def _clamp(x: np.ndarray, bounds: Bounds) -> np.ndarray:
    if bounds is None:
        return x
    return np.clip(x, [bounds[0], bounds[1]], [bounds[2], bounds[3]])


def project_min_distance(
    x: np.ndarray,
    d_min: float,
    bounds: Bounds = None,
    n_steps: int = 200,
    rho: float = 10.0,
    seed: int = 0,
) -> np.ndarray:
    """Penalty descent toward pairwise separation, closed by an exact repair.

    Minimises ``|x' - x|^2 + rho * sum max(0, d_min - r_ij)^2 + rho * wall^2``
    in units of ``d_min`` (``rho`` is therefore ``rho / d_min**2`` in raw units).
    The descent keeps movement small; the trailing repair makes the output
    strictly feasible, which is what keeps the operator idempotent.
    """
    x = np.asarray(x, dtype=np.float64)
    _check_packing(len(x), d_min, bounds)
    if min_pairwise_distance(x) >= d_min and _inside(x, bounds):
        return x.copy()
    scale = d_min
    z0 = x / scale
    b = None if bounds is None else tuple(np.asarray(bounds) / scale)
    z = z0.copy()
    lr = 1.0 / (2.0 + 8.0 * rho)
    iu = np.triu_indices(len(z), 1)
    for _ in range(n_steps):
        diff = z[:, None, :] - z[None, :, :]
        r = np.linalg.norm(diff, axis=-1)
        viol = np.zeros_like(r)
        viol[iu] = np.maximum(0.0, 1.0 - r[iu])
        viol = viol + viol.T
        with np.errstate(invalid="ignore", divide="ignore"):
            unit = np.where(r[..., None] > 1e-12, diff / r[..., None], 0.0)
        # d/dz_i of rho * (1 - r_ij)^2 = -2 rho (1 - r_ij) * unit_ij
        g = 2.0 * (z - z0) - 2.0 * rho * (viol[..., None] * unit).sum(axis=1)
        if b is not None:
            lo = np.array(b[:2])
            hi = np.array(b[2:])
            g += 2.0 * rho * (np.maximum(0.0, z - hi) - np.maximum(0.0, lo - z))
        if not np.any(viol) and (b is None or _inside(z, b)):
            break
        z = z - lr * g
    out = _clamp(z * scale, bounds)
    return finalize_min_distance(out, d_min, bounds, seed=seed)


def _inside(x: np.ndarray, bounds: Bounds) -> bool:
    if bounds is None:
        return True
    return bool(np.all(x >= [bounds[0], bounds[1]]) and np.all(x <= [bounds[2], bounds[3]]))


def min_pairwise_distance(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    if len(x) < 2:
        return math.inf
    r = np.linalg.norm(x[:, None] - x[None, :], axis=-1)
    return float(r[np.triu_indices(len(x), 1)].min())


def finalize_min_distance(
    x: np.ndarray,
    d_min: float,
    bounds: Bounds = None,
    seed: int = 0,
    max_iter: int = 200,
) -> np.ndarray:
    """Exact repair to pairwise separation ``d_min`` inside ``bounds``.

    Violating pairs are pushed apart symmetrically and re-clamped. If the
    sweeps stall (points jammed against walls), conflicting points are moved
    to the nearest free candidate position, and as a last resort all points
    are assigned to hexagonal lattice sites with minimal total movement.
    """
    x = _clamp(np.asarray(x, dtype=np.float64).copy(), bounds)
    _check_packing(len(x), d_min, bounds)
    rng = np.random.default_rng(seed)
    # Aim a hair above d_min so rounding cannot leave a pair at d_min - ulp.
    target = d_min * (1.0 + 1e-9)
    n = len(x)
    for _ in range(max_iter):
        moved = False
        for i in range(n):
            for j in range(i + 1, n):
                delta = x[j] - x[i]
                r = math.hypot(delta[0], delta[1])
                if r >= d_min:
                    continue
                if r < 1e-12:
                    ang = rng.uniform(0.0, 2.0 * math.pi)
                    unit = np.array([math.cos(ang), math.sin(ang)])
                else:
                    unit = delta / r
                push = 0.5 * (target - r) * unit
                x[i] -= push
                x[j] += push
                moved = True
        x = _clamp(x, bounds)
        if not moved and min_pairwise_distance(x) >= d_min:
            return x
    for fallback in (_greedy_relocate, _lattice_assign):
        y = fallback(x, d_min, target, bounds)
        if y is not None and min_pairwise_distance(y) >= d_min and _inside(y, bounds):
            return y
    raise ProjectionError(f"separation repair failed for {n} points with separation {d_min}")


def _greedy_relocate(x: np.ndarray, d_min: float, target: float, bounds: Bounds) -> Optional[np.ndarray]:
    """Keep points in order; move each conflicting one to the nearest free candidate."""
    ang = np.linspace(0.0, 2.0 * math.pi, 64, endpoint=False)
    ring = np.stack([np.cos(ang), np.sin(ang)], 1)
    grid = None
    if bounds is not None:
        step = d_min / 16.0
        gx = np.arange(bounds[0], bounds[2] + 1e-12, step)
        gy = np.arange(bounds[1], bounds[3] + 1e-12, step)
        grid = np.stack(np.meshgrid(gx, gy), -1).reshape(-1, 2)
    placed: list[np.ndarray] = []
    for p in x:
        if all(math.dist(p, q) >= target for q in placed):
            placed.append(p.copy())
            continue
        cands = [q + target * (1.0 + 1e-6) * ring for q in placed]
        cands += [p + target * k * ring for k in range(1, len(x) + 2)]
        if grid is not None:
            cands.append(grid)
        c = np.concatenate(cands)
        if bounds is not None:
            c = c[(c >= [bounds[0], bounds[1]]).all(1) & (c <= [bounds[2], bounds[3]]).all(1)]
        if placed:
            P = np.stack(placed)
            c = c[(np.linalg.norm(c[:, None] - P[None], axis=-1) >= target).all(1)]
        if len(c) == 0:
            return None
        placed.append(c[np.argmin(np.linalg.norm(c - p, axis=1))].copy())
    return np.stack(placed)


def _lattice_assign(x: np.ndarray, d_min: float, target: float, bounds: Bounds) -> Optional[np.ndarray]:
    """Minimal-movement assignment of the points to hexagonal lattice sites."""
    if bounds is None:
        c = x.mean(0)
        half = target * (len(x) + 1)
        bounds = (c[0] - half, c[1] - half, c[0] + half, c[1] + half)
    for s in (target, d_min):
        sites = []
        r = 0
        while bounds[1] + r * s * math.sqrt(3) / 2 <= bounds[3] + 1e-12:
            y = min(bounds[1] + r * s * math.sqrt(3) / 2, bounds[3])
            xs = np.arange(bounds[0] + (r % 2) * s / 2, bounds[2] + 1e-12, s)
            sites += [(min(v, bounds[2]), y) for v in xs]
            r += 1
        sites = np.array(sites)
        if len(sites) >= len(x):
            cost = np.linalg.norm(x[:, None] - sites[None], axis=-1) ** 2
            return sites[linear_assignment(cost)]
    return None


# ---------------------------------------------------------------------------
# Box clamping (local boundaries)


def project_boxes(x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Clamp each entity into its own axis-aligned box; exact and idempotent."""
    return np.clip(np.asarray(x, dtype=np.float64), lo, hi)


# ---------------------------------------------------------------------------
# Operator bundle and registry


@dataclass
class ProjectionOperator:
    """Soft projection, exact finalization and a feasibility check for one scenario."""

    scenario_id: str
    project: Callable[[np.ndarray], np.ndarray]
    finalize: Callable[[np.ndarray], np.ndarray]
    is_feasible: Callable[[np.ndarray], bool]

    def project_batch(self, xs: np.ndarray) -> np.ndarray:
        return np.stack([self.project(x) for x in xs])

    def finalize_batch(self, xs: np.ndarray) -> np.ndarray:
        return np.stack([self.finalize(x) for x in xs])

    def is_near_feasible(self, x: np.ndarray, tol: float = 1e-4) -> bool:
        """Feasible up to ``tol``: finalization is valid and moves no coordinate further.

        Sampling runs in float32, so designs that land on a constraint
        boundary are off by rounding error; this check ignores that.
        """
        x = np.asarray(x, dtype=np.float64)
        if not np.all(np.isfinite(x)):
            return False
        fx = self.finalize(x)
        return bool(self.is_feasible(fx)) and float(np.abs(fx - x).max(initial=0.0)) <= tol


_REGISTRY: dict[str, ProjectionOperator] = {}


def register(op: ProjectionOperator) -> ProjectionOperator:
    _REGISTRY[op.scenario_id] = op
    return op


def get_operator(scenario_id: str) -> ProjectionOperator:
    try:
        return _REGISTRY[scenario_id]
    except KeyError:
        raise KeyError(f"no projection registered for scenario {scenario_id!r}") from None
