"""Closed-form soft co-design checks and run-comparison statistics."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from dicode.codesign import ema


@dataclass
class DiscreteDesignSpace:
    designs: list
    returns: np.ndarray

    def __post_init__(self):
        self.returns = np.asarray(self.returns, dtype=np.float64)
        if len(self.returns) < 1:
            raise ValueError("need at least one design")
        if len(self.designs) != len(self.returns):
            raise ValueError("one return per design required")
        if not np.all(np.isfinite(self.returns)):
            raise ValueError("returns must be finite")

    @classmethod
    def from_returns(cls, returns: Sequence[float]) -> "DiscreteDesignSpace":
        return cls(list(range(len(returns))), np.asarray(returns, dtype=np.float64))


def _returns(space) -> np.ndarray:
    return space.returns if isinstance(space, DiscreteDesignSpace) else np.asarray(space, dtype=np.float64)


def soft_codesign_exact(space, omega: float) -> np.ndarray:
    """Maximum-entropy optimum ``p_i ∝ exp(omega * J_i)``."""
    if omega <= 0:
        raise ValueError("omega must be positive")
    z = omega * _returns(space)
    return np.exp(z - logsumexp(z))


def entropy(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        return -np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0).sum(-1)


def brute_force_objective(space, dist, omega: float) -> np.ndarray:
    """``E_p[J] + H(p) / omega`` for one distribution or a stack of them."""
    if omega <= 0:
        raise ValueError("omega must be positive")
    J = _returns(space)
    p = np.asarray(dist, dtype=np.float64)
    if p.shape[-1] != len(J):
        raise ValueError("distribution length does not match the design count")
    if np.any(p < -1e-9) or np.any(np.abs(p.sum(-1) - 1.0) > 1e-9):
        raise ValueError("distribution is not on the simplex")
    return p @ J + entropy(np.clip(p, 0.0, None)) / omega


def simplex_grid(k: int, resolution: float) -> np.ndarray:
    """All points of the ``k``-simplex whose coordinates are multiples of ``resolution``."""
    n = int(round(1.0 / resolution))
    if k == 1:
        return np.ones((1, 1))
    if k == 2:
        a = np.arange(n + 1) / n
        return np.stack([a, 1 - a], 1)
    if k == 3:
        i, j = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
        m = i + j <= n
        i, j = i[m], j[m]
        return np.stack([i, j, n - i - j], 1) / n
    pts = [c for c in itertools.product(range(n + 1), repeat=k - 1) if sum(c) <= n]
    arr = np.array(pts)
    return np.concatenate([arr, n - arr.sum(1, keepdims=True)], 1) / n


def grid_search_optimum(space, omega: float, resolution: float = 0.001) -> tuple[np.ndarray, float]:
    """Best grid point for ``K <= 3``; random-direction local search beyond that."""
    J = _returns(space)
    if len(J) <= 3:
        grid = simplex_grid(len(J), resolution)
        vals = brute_force_objective(J, grid, omega)
        i = int(np.argmax(vals))
        return grid[i], float(vals[i])
    return _local_search(J, omega, resolution)


def _local_search(J: np.ndarray, omega: float, resolution: float, seed: int = 0, iters: int = 20000):
    rng = np.random.default_rng(seed)
    p = np.full(len(J), 1.0 / len(J))
    best = float(brute_force_objective(J, p, omega))
    step = 0.1
    for _ in range(iters):
        d = rng.standard_normal(len(J))
        d -= d.mean()
        q = p + step * d / np.linalg.norm(d)
        if np.any(q < 0):
            continue
        q /= q.sum()
        val = float(brute_force_objective(J, q, omega))
        if val > best:
            p, best = q, val
        elif step > resolution:
            step *= 0.999
    return p, best


# ---------------------------------------------------------------------------
# Run comparison


@dataclass
class Comparison:
    difference: float
    ci_low: float
    ci_high: float
    p_value: float
    paired: bool
    n_a: int
    n_b: int

    @property
    def excludes_zero(self) -> bool:
        return self.ci_low > 0 or self.ci_high < 0


def final_smoothed(returns: Sequence[float], alpha: float = 0.95) -> float:
    return float(ema(returns, alpha)[-1])


def _finals(metrics, statistic: str) -> np.ndarray:
    out = []
    for m in metrics:
        arr = np.asarray(m, dtype=np.float64)
        if arr.ndim == 0:
            out.append(float(arr))
        elif statistic == "ema_final":
            out.append(final_smoothed(arr))
        elif statistic == "final":
            out.append(float(arr[-1]))
        elif statistic == "mean":
            out.append(float(arr.mean()))
        else:
            raise ValueError(f"unknown statistic {statistic!r}")
    return np.array(out)


def compare_runs(
    metrics_a: Sequence,
    metrics_b: Sequence,
    statistic: str = "ema_final",
    confidence: float = 0.95,
    n_boot: int = 10000,
    seed: int = 0,
    paired: Optional[bool] = None,
) -> Comparison:
    """Bootstrap interval for ``stat(a) - stat(b)`` across seeds.

    Each element of ``metrics_a``/``metrics_b`` is one seed's return curve (or
    an already reduced scalar). Equal seed counts are paired by index unless
    told otherwise. Percentiles are widened by the small-sample expansion
    ``sqrt(n / (n - 1)) * t_{n-1}``, which keeps coverage near nominal for a
    handful of seeds.
    """
    a, b = _finals(metrics_a, statistic), _finals(metrics_b, statistic)
    if len(a) < 3 or len(b) < 3:
        raise ValueError("need at least 3 seeds per run")
    if paired is None:
        paired = len(a) == len(b)
    rng = np.random.default_rng(seed)
    if paired:
        if len(a) != len(b):
            raise ValueError("paired comparison needs equal seed counts")
        diff = a - b
        idx = rng.integers(0, len(diff), size=(n_boot, len(diff)))
        boots = diff[idx].mean(1)
        n = len(diff)
    else:
        ia = rng.integers(0, len(a), size=(n_boot, len(a)))
        ib = rng.integers(0, len(b), size=(n_boot, len(b)))
        boots = a[ia].mean(1) - b[ib].mean(1)
        n = min(len(a), len(b))
    alpha = 1.0 - confidence
    z = math.sqrt(n / (n - 1)) * stats.t.ppf(1 - alpha / 2, n - 1)
    tail = stats.norm.cdf(-z)
    lo, hi = np.quantile(boots, [tail, 1 - tail])
    est = float(a.mean() - b.mean())
    p = float(min(1.0, 2 * min((boots <= 0).mean(), (boots >= 0).mean())))
    return Comparison(est, float(lo), float(hi), p, paired, len(a), len(b))


# ---------------------------------------------------------------------------
# Design statistics


def occupancy_frequency(masks: Sequence[np.ndarray]) -> np.ndarray:
    """Per-cell shelf frequency over a stack of ``(C, H, W)`` masks (any colour)."""
    m = np.asarray(masks, dtype=np.float64)
    if m.ndim != 4 or len(m) == 0:
        raise ValueError("expected a non-empty stack of (C, H, W) masks")
    return m.sum(axis=1).clip(0, 1).mean(axis=0)


@dataclass
class AdjacencyTest:
    mean_generated: float
    mean_uniform: float
    statistic: float
    p_value: float


def adjacency_test(generated_counts: Sequence[float], uniform_counts: Sequence[float]) -> AdjacencyTest:
    """One-sided Mann-Whitney test that generated designs place more shelves by matching goals."""
    g = np.asarray(generated_counts, dtype=np.float64)
    u = np.asarray(uniform_counts, dtype=np.float64)
    res = stats.mannwhitneyu(g, u, alternative="greater")
    return AdjacencyTest(float(g.mean()), float(u.mean()), float(res.statistic), float(res.pvalue))
