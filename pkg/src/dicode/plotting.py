"""Figures for training curves, design heatmaps and sampler comparisons.

Every figure is written as a PNG/SVG pair next to the CSV that holds its data.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from dicode.codesign import ema  # noqa: E402


def _save(fig, stem: Path) -> list[Path]:
    stem.parent.mkdir(parents=True, exist_ok=True)
    out = [stem.with_suffix(".png"), stem.with_suffix(".svg")]
    fig.savefig(out[0], dpi=120, bbox_inches="tight")
    fig.savefig(out[1], bbox_inches="tight")
    plt.close(fig)
    return out


def curve_band(curves: Sequence[np.ndarray], n_boot: int = 2000, seed: int = 0, alpha: float = 0.95):
    """EMA-smoothed mean curve with a per-step bootstrap band over seeds (None for one seed)."""
    n = min(len(c) for c in curves)
    sm = np.stack([ema(np.asarray(c[:n], dtype=np.float64), alpha) for c in curves])
    mean = sm.mean(0)
    if len(sm) < 2:
        return mean, None, None
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(sm), size=(n_boot, len(sm)))
    boots = sm[idx].mean(1)
    lo, hi = np.quantile(boots, [0.025, 0.975], axis=0)
    return mean, lo, hi


def plot_curves(runs: Mapping[str, Sequence[np.ndarray]], stem: Path, xlabel: str = "iteration") -> list[Path]:
    """``runs`` maps method name to a list of per-seed return curves."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, curves in runs.items():
        mean, lo, hi = curve_band(curves)
        x = np.arange(len(mean))
        ax.plot(x, mean, label=f"{name} (n={len(curves)})")
        if lo is not None:
            ax.fill_between(x, lo, hi, alpha=0.25)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("mean episode return (EMA 0.95)")
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, stem)


def plot_heatmap(freq: np.ndarray, stem: Path, goals: Sequence[tuple[int, int, int]] = (), title: str = "") -> list[Path]:
    """Per-cell occupancy frequency; goal cells are outlined in their colour index."""
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(freq, cmap="viridis", vmin=0.0, vmax=max(1e-9, float(freq.max())))
    fig.colorbar(im, ax=ax, label="shelf frequency")
    palette = ["tab:red", "tab:blue", "tab:green", "tab:orange"]
    for r, c, col in goals:
        ax.add_patch(plt.Rectangle((c - 0.5, r - 0.5), 1, 1, fill=False, lw=2.5, ec=palette[col % len(palette)]))
    ax.set_xticks(range(freq.shape[1]))
    ax.set_yticks(range(freq.shape[0]))
    if title:
        ax.set_title(title)
    return _save(fig, stem)


def plot_method_bars(values: Mapping[str, np.ndarray], stem: Path, ylabel: str = "critic value") -> list[Path]:
    """Box plot of per-design critic values for each sampler."""
    fig, ax = plt.subplots(figsize=(6, 4))
    names = list(values)
    ax.boxplot([np.asarray(values[k]) for k in names], showmeans=True)
    ax.set_xticks(range(1, len(names) + 1))
    ax.set_xticklabels(names)
    ax.set_ylabel(ylabel)
    ax.grid(alpha=0.3, axis="y")
    return _save(fig, stem)
