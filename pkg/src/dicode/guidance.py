"""Critic-guided, constraint-projected sampling and the ablation samplers.

Sign convention used throughout: guidance performs gradient *ascent* on the
environment critic's value, so a critic gradient is subtracted from the
predicted noise (which moves the implied clean sample up the gradient).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch
from torch import nn

from dicode.diffusion import (
    DesignSample,
    NoiseSchedule,
    _as_steps,
    ddim_step,
    ddim_timesteps,
    predict_clean,
    timestep_embedding,
)

log = logging.getLogger(__name__)

MAX_RETRIES = 3


class GuidanceError(RuntimeError):
    """A guided chain produced non-finite values on every retry."""


@dataclass(frozen=True)
class Anneal:
    """Piecewise-linear guidance weight over sampled environment batches."""

    start: float
    end: float
    n_batches: int

    def __call__(self, step: int) -> float:
        if self.n_batches <= 0 or step >= self.n_batches:
            return float(self.end)
        if step <= 0:
            return float(self.start)
        return float(self.start + (self.end - self.start) * step / self.n_batches)


@dataclass
class GuidanceConfig:
    omega: float = 0.0
    recurrences_k: int = 1
    backward_steps_m: int = 0
    backward_lr: float = 0.01
    n_ddim_steps: int = 50
    anneal: Optional[Anneal] = None

    def __post_init__(self):
        if self.omega < 0:
            raise ValueError("omega must be non-negative")
        if self.recurrences_k < 1:
            raise ValueError("recurrences_k must be >= 1")
        if self.backward_steps_m < 0:
            raise ValueError("backward_steps_m must be >= 0")
        if self.backward_lr <= 0:
            raise ValueError("backward_lr must be positive")
        if self.n_ddim_steps < 1:
            raise ValueError("n_ddim_steps must be >= 1")

    def omega_at(self, batch_index: int) -> float:
        return self.anneal(batch_index) if self.anneal is not None else self.omega


# ---------------------------------------------------------------------------
# Critics


class QuadraticCritic(nn.Module):
    """``v(x) = -|x - c|^2`` summed over all design coordinates."""

    def __init__(self, center):
        super().__init__()
        self.register_buffer("center", torch.as_tensor(np.asarray(center), dtype=torch.float64))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        diff = x.reshape(x.shape[0], -1) - self.center.reshape(1, -1).to(x.dtype)
        return -(diff**2).sum(-1)


class TwoPeakCritic(nn.Module):
    """Per-entity sum of a high global bump and a lower decoy bump.

    ``x`` is viewed as ``(n_entities, dim)``; each entity scores
    ``exp(-|p - g|^2 / 2s^2) + decoy * exp(-|p - l|^2 / 2s^2)``.
    Uniform-start hill climbing lands on the decoy for a sizeable fraction of
    entities, which makes this a multi-modal benchmark for the samplers.
    """

    def __init__(self, peaks, decoys, width: float = 0.1, decoy: float = 0.6):
        super().__init__()
        self.register_buffer("peaks", torch.as_tensor(np.asarray(peaks), dtype=torch.float64))
        self.register_buffer("decoys", torch.as_tensor(np.asarray(decoys), dtype=torch.float64))
        self.width = width
        self.decoy = decoy

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        p = x.reshape(x.shape[0], *self.peaks.shape)
        g = torch.exp(-((p - self.peaks.to(x.dtype)) ** 2).sum(-1) / (2 * self.width**2))
        l = torch.exp(-((p - self.decoys.to(x.dtype)) ** 2).sum(-1) / (2 * self.width**2))
        return (g + self.decoy * l).sum(-1)


class MLPCritic(nn.Module):
    """Design -> scalar value regressor on the flattened wide-domain array."""

    def __init__(self, data_shape: Sequence[int], hidden: int = 128, depth: int = 2):
        super().__init__()
        self.data_shape = tuple(data_shape)
        n = int(np.prod(self.data_shape))
        layers: list[nn.Module] = [nn.Linear(n, hidden), nn.SiLU()]
        for _ in range(depth - 1):
            layers += [nn.Linear(hidden, hidden), nn.SiLU()]
        layers.append(nn.Linear(hidden, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        w = self.net[0].weight
        return self.net(x.reshape(x.shape[0], -1).to(w.dtype)).squeeze(-1).to(x.dtype)


class NoisyCritic(nn.Module):
    """Time-conditioned critic ``v(x_t, t)`` used by the classifier-guidance ablation."""

    def __init__(self, data_shape: Sequence[int], hidden: int = 128, time_dim: int = 32):
        super().__init__()
        self.data_shape = tuple(data_shape)
        self.time_dim = time_dim
        n = int(np.prod(self.data_shape))
        self.net = nn.Sequential(
            nn.Linear(n + time_dim, hidden), nn.SiLU(),
            nn.Linear(hidden, hidden), nn.SiLU(),
            nn.Linear(hidden, 1),
        )

    def forward(self, x_t: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        b = x_t.shape[0]
        h = torch.cat([x_t.reshape(b, -1).float(), timestep_embedding(t, self.time_dim)], -1)
        return self.net(h).squeeze(-1).to(x_t.dtype)


def critic_grad(v: Callable, x: torch.Tensor) -> torch.Tensor:
    """Gradient of ``sum(v(x))`` with respect to ``x`` (per-sample gradients)."""
    with torch.enable_grad():
        xx = x.detach().requires_grad_(True)
        (g,) = torch.autograd.grad(v(xx).sum(), xx, allow_unused=True)
    return torch.zeros_like(x) if g is None else g


# ---------------------------------------------------------------------------
# Projection helpers


def _project_tensor(P, x: torch.Tensor) -> torch.Tensor:
    arr = x.detach().cpu().numpy().astype(np.float64)
    fn = getattr(P, "project_batch", None)
    if fn is not None:
        out = fn(arr)
    else:
        out = np.stack([P(a) for a in arr])
    return torch.as_tensor(out, dtype=x.dtype)


def project_noise(eps: torch.Tensor, x_t: torch.Tensor, t: int, P, s: NoiseSchedule) -> torch.Tensor:
    """Re-express ``eps`` so that its implied clean sample is the projected one."""
    ab = s.ab(t, x_t)
    if float(torch.as_tensor(ab).min()) >= 1.0:
        raise ValueError("project_noise needs t >= 1")
    x0 = predict_clean(x_t, t, s=s, eps_hat=eps)
    x0p = _project_tensor(P, x0)
    return x_t / torch.sqrt(1.0 - ab) - torch.sqrt(ab) / torch.sqrt(1.0 - ab) * x0p


# ---------------------------------------------------------------------------
# Guidance primitives


def forward_guidance(
    x_t: torch.Tensor,
    t: int,
    d: Callable,
    v: Callable,
    omega: float,
    s: NoiseSchedule,
    projection=None,
) -> torch.Tensor:
    """``d(x_t, t) - omega * sqrt(1 - ab_t) * grad_{x_t} v(x0_hat)``.

    When ``projection`` is given, the critic reads the projected clean sample
    and its gradient is passed straight through the (piecewise-constant)
    projection.
    """
    steps = _as_steps(t, x_t.shape[0])
    if omega == 0:
        with torch.no_grad():
            return d(x_t, steps)
    with torch.enable_grad():
        x = x_t.detach().requires_grad_(True)
        eps = d(x, steps)
        x0 = predict_clean(x, t, s=s, eps_hat=eps)
        if projection is not None:
            x0 = x0 + (_project_tensor(projection, x0) - x0).detach()
        (g,) = torch.autograd.grad(v(x0).sum(), x, allow_unused=True)
    if g is None:
        g = torch.zeros_like(x_t)
    ab = s.ab(t, x_t)
    return eps.detach() - omega * torch.sqrt(1.0 - ab) * g


def backward_guidance(
    eps_hat: torch.Tensor,
    x_t: torch.Tensor,
    t: int,
    v: Callable,
    m: int,
    lr: float,
    s: NoiseSchedule,
    return_delta: bool = False,
):
    """Refine ``eps_hat`` by ``m`` Adam ascent steps on ``v`` around its clean sample."""
    if m < 0:
        raise ValueError("m must be >= 0")
    if m == 0:
        return (eps_hat, torch.zeros_like(eps_hat)) if return_delta else eps_hat
    x0 = predict_clean(x_t, t, s=s, eps_hat=eps_hat).detach()
    delta = torch.zeros_like(x0, requires_grad=True)
    opt = torch.optim.Adam([delta], lr=lr)
    with torch.enable_grad():
        for _ in range(m):
            opt.zero_grad()
            loss = -v(x0 + delta).sum()
            if loss.requires_grad:
                loss.backward()
            if delta.grad is None:
                delta.grad = torch.zeros_like(delta)
            opt.step()
    delta = delta.detach()
    ab = s.ab(t, x_t)
    out = eps_hat - torch.sqrt(ab / (1.0 - ab)) * delta
    return (out, delta) if return_delta else out


def recurrence_step(
    x_t: torch.Tensor,
    eps_bar: torch.Tensor,
    t: int,
    s: NoiseSchedule,
    rng: torch.Generator,
    t_prev: Optional[int] = None,
) -> torch.Tensor:
    """Denoise one step to ``t_prev`` (default ``t - 1``) and re-noise back to level ``t``."""
    if t < 1:
        raise ValueError("recurrence needs t >= 1")
    t_prev = t - 1 if t_prev is None else t_prev
    x_prev = ddim_step(x_t, eps_bar, t, t_prev, s)
    ratio = float(s.alpha_bar[t] / s.alpha_bar[t_prev])
    xi = torch.randn(x_t.shape, generator=rng, dtype=x_t.dtype)
    return math.sqrt(ratio) * x_prev + math.sqrt(max(0.0, 1.0 - ratio)) * xi


# ---------------------------------------------------------------------------
# Samplers


@dataclass
class ChainRecord:
    seed: int
    chain: int
    values: list = field(default_factory=list)
    feasible_before_finalize: bool = True
    retries: int = 0

    def to_json(self) -> str:
        return json.dumps(
            {
                "seed": self.seed,
                "chain": self.chain,
                "values": [round(float(v), 6) for v in self.values],
                "feasible_before_finalize": bool(self.feasible_before_finalize),
                "retries": self.retries,
            }
        )


def write_diagnostics(path: Union[str, Path], records: Sequence[ChainRecord]) -> None:
    with open(path, "a") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def _seed_from(rng: Union[int, torch.Generator]) -> int:
    if isinstance(rng, (int, np.integer)):
        return int(rng)
    return int(torch.randint(0, 2**31 - 1, (1,), generator=rng))


def _finalize(P, x: torch.Tensor, scenario_id: str):
    arr = x.detach().cpu().numpy().astype(np.float64)
    feas = [P.is_near_feasible(a) for a in arr]
    out = [DesignSample(P.finalize(a), scenario_id, True) for a in arr]
    return out, feas


def _pug_chain(d, v, P, cfg, omega, batch, seed, s, record_values, return_chain):
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn((batch, *d.data_shape), generator=gen)
    chain = [x.clone()]
    values: list[np.ndarray] = []
    for t, t_prev in ddim_timesteps(s.T, cfg.n_ddim_steps):
        for n in range(cfg.recurrences_k):
            eps = forward_guidance(x, t, d, v, omega, s, projection=P)
            eps = backward_guidance(eps, x, t, v, cfg.backward_steps_m, cfg.backward_lr, s)
            eps = project_noise(eps, x, t, P, s)
            if n < cfg.recurrences_k - 1:
                x = recurrence_step(x, eps, t, s, gen, t_prev=t_prev)
        x = ddim_step(x, eps, t, t_prev, s).detach()
        if not torch.all(torch.isfinite(x)):
            return None, chain, values
        if record_values:
            with torch.no_grad():
                x0 = _project_tensor(P, predict_clean(x, t, s=s, eps_hat=eps)) if t_prev > 0 else _project_tensor(P, x)
                values.append(v(x0).detach().cpu().numpy())
        if return_chain:
            chain.append(x.clone())
    return x, chain, values


def pug_sample(
    d: nn.Module,
    v: Callable,
    P,
    cfg: GuidanceConfig,
    batch: int,
    rng: Union[int, torch.Generator],
    s: NoiseSchedule,
    scenario_id: str = "",
    omega: Optional[float] = None,
    diagnostics: Optional[list] = None,
    return_chain: bool = False,
):
    """Projected universal guidance; every returned design is finalized.

    Per strided step ``t``: ``k`` passes of forward guidance on the projected
    clean sample, ``m`` backward refinement steps, projection of the noise,
    with a recurrence (denoise then re-noise) between passes; the last pass
    takes the DDIM step to the next index. A chain that goes non-finite is
    retried with a fresh seed up to three times.
    """
    omega = cfg.omega if omega is None else float(omega)
    seed = _seed_from(rng)
    record = diagnostics is not None
    for attempt in range(MAX_RETRIES + 1):
        chain_seed = seed + 7919 * attempt
        x, chain, values = _pug_chain(d, v, P, cfg, omega, batch, chain_seed, s, record, return_chain)
        if x is not None:
            break
        log.warning("non-finite guided chain (seed=%d, attempt=%d, omega=%.3g)", chain_seed, attempt, omega)
    else:
        raise GuidanceError(f"guided chain diverged after {MAX_RETRIES} retries (seed={seed})")
    samples, feas = _finalize(P, x, scenario_id)
    if record:
        vals = np.stack(values, axis=1) if values else np.zeros((batch, 0))
        for i in range(batch):
            diagnostics.append(ChainRecord(chain_seed, i, list(vals[i]), feas[i], attempt))
    return (samples, chain) if return_chain else samples


def descent_sample(
    v: Callable,
    P,
    generator: Callable[[np.random.Generator, int], np.ndarray],
    n_restarts: int,
    n_steps: int,
    lr: float,
    rng: np.random.Generator,
    scenario_id: str = "",
) -> DesignSample:
    """Multi-restart projected gradient ascent from uniform designs; best restart wins."""
    x = torch.as_tensor(generator(rng, n_restarts), dtype=torch.float64)
    for _ in range(n_steps):
        g = critic_grad(v, x)
        x = _project_tensor(P, x + lr * g)
    finals = np.stack([P.finalize(a) for a in x.numpy()])
    with torch.no_grad():
        vals = v(torch.as_tensor(finals)).numpy()
    best = int(np.argmax(vals))
    return DesignSample(finals[best], scenario_id, True)


def topk_sample(
    v: Callable,
    generator: Callable[[np.random.Generator, int], np.ndarray],
    pool: int,
    keep: int,
    rng: np.random.Generator,
    scenario_id: str = "",
) -> list[DesignSample]:
    """Best ``keep`` of ``pool`` uniform designs under ``v`` (ties: lowest index)."""
    if not (pool >= keep >= 1):
        raise ValueError("need pool >= keep >= 1")
    designs = np.asarray(generator(rng, pool), dtype=np.float64)
    with torch.no_grad():
        vals = v(torch.as_tensor(designs)).numpy()
    order = np.argsort(-vals, kind="stable")[:keep]
    return [DesignSample(designs[i], scenario_id, True) for i in order]


def add_style_sample(
    d: nn.Module,
    v_noisy: Callable,
    cfg: GuidanceConfig,
    rng: Union[int, torch.Generator],
    s: NoiseSchedule,
    P,
    batch: int = 1,
    scenario_id: str = "",
    omega: Optional[float] = None,
    return_feasibility: bool = False,
):
    """Classifier guidance with a noise-conditioned critic; one projection at the end."""
    omega = cfg.omega if omega is None else float(omega)
    gen = torch.Generator().manual_seed(_seed_from(rng))
    x = torch.randn((batch, *d.data_shape), generator=gen)
    for t, t_prev in ddim_timesteps(s.T, cfg.n_ddim_steps):
        steps = _as_steps(t, batch)
        with torch.no_grad():
            eps = d(x, steps)
        if omega != 0:
            g = critic_grad(lambda z: v_noisy(z, steps), x)
            eps = eps - omega * torch.sqrt(1.0 - s.ab(t, x)) * g
        x = ddim_step(x, eps, t, t_prev, s).detach()
    samples, feas = _finalize(P, x, scenario_id)
    return (samples, feas) if return_feasibility else samples
