"""Discrete-time denoising diffusion: schedules, noising, DDPM loss and DDIM steps.

All tensors carry a leading batch dimension. Step indices run ``0..T`` with
``alpha_bar[0] == 1`` (clean data) and ``alpha_bar[T]`` close to zero.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np
import torch
from torch import nn

log = logging.getLogger(__name__)

DIFF_MAGIC = b"DICODE-DIFF-v1\n"

StepLike = Union[int, torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule with cumulative products.

    ``beta[i]`` is the variance added at step ``i + 1``; ``alpha_bar`` has
    ``T + 1`` entries so that ``alpha_bar[t]`` matches step ``t`` directly.
    """

    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    beta_start: float = 0.0
    beta_end: float = 0.0

    def ab(self, t: StepLike, like: torch.Tensor) -> torch.Tensor:
        """``alpha_bar[t]`` broadcastable against ``like`` (batch-first)."""
        table = torch.as_tensor(self.alpha_bar, dtype=like.dtype, device=like.device)
        if isinstance(t, torch.Tensor) and t.ndim > 0:
            out = table[t.long()]
            return out.reshape(-1, *([1] * (like.ndim - 1)))
        return table[int(t)]


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    beta = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    return NoiseSchedule(int(T), beta, alpha_bar, float(beta_start), float(beta_end))


def _check_step(t: StepLike, s: NoiseSchedule, lo: int = 0) -> None:
    tt = t if isinstance(t, torch.Tensor) else torch.tensor(t)
    if tt.numel() and (int(tt.min()) < lo or int(tt.max()) > s.T):
        raise ValueError(f"step index out of range [{lo}, {s.T}]: {t}")


def _as_steps(t: StepLike, batch: int) -> torch.Tensor:
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        return t.long()
    return torch.full((batch,), int(t), dtype=torch.long)


def noisify(x0: torch.Tensor, eps: torch.Tensor, t: StepLike, s: NoiseSchedule) -> torch.Tensor:
    """Closed-form forward process ``sqrt(ab) x0 + sqrt(1 - ab) eps``."""
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")
    _check_step(t, s)
    ab = s.ab(t, x0)
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps


def predict_clean(
    x_t: torch.Tensor,
    t: StepLike,
    d: Optional[Callable] = None,
    s: Optional[NoiseSchedule] = None,
    eps_hat: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Denoiser-implied clean sample ``(x_t - sqrt(1 - ab) eps) / sqrt(ab)``.

    Either a denoiser ``d`` or a precomputed ``eps_hat`` must be supplied.
    """
    if s is None:
        raise ValueError("a noise schedule is required")
    _check_step(t, s, lo=1)
    if eps_hat is None:
        if d is None:
            raise ValueError("need a denoiser or eps_hat")
        eps_hat = d(x_t, _as_steps(t, x_t.shape[0]))
    ab = s.ab(t, x_t)
    return (x_t - torch.sqrt(1.0 - ab) * eps_hat) / torch.sqrt(ab)


def ddim_step(
    x_t: torch.Tensor, eps_hat: torch.Tensor, t: int, t_prev: int, s: NoiseSchedule
) -> torch.Tensor:
    """Deterministic (eta = 0) DDIM update from step ``t`` to ``t_prev``."""
    if not (0 <= t_prev < t <= s.T):
        raise ValueError(f"need 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}")
    x0_hat = predict_clean(x_t, t, s=s, eps_hat=eps_hat)
    ab_prev = s.ab(t_prev, x_t)
    return torch.sqrt(ab_prev) * x0_hat + torch.sqrt(1.0 - ab_prev) * eps_hat


def ddim_timesteps(T: int, n_steps: int) -> list[tuple[int, int]]:
    """Evenly strided ``(t, t_prev)`` pairs from ``T`` down to 0."""
    if n_steps < 1 or n_steps > T:
        raise ValueError(f"n_steps must lie in [1, {T}], got {n_steps}")
    grid = np.round(np.linspace(T, 0, n_steps + 1)).astype(int)
    return [(int(a), int(b)) for a, b in zip(grid[:-1], grid[1:])]


def ddpm_loss(
    d: Callable, batch: torch.Tensor, s: NoiseSchedule, rng: torch.Generator
) -> torch.Tensor:
    """Noise-prediction MSE with ``t ~ U{1..T}`` then ``eps ~ N(0, I)`` drawn from ``rng``."""
    if batch.shape[0] == 0:
        raise ValueError("empty batch")
    t = torch.randint(1, s.T + 1, (batch.shape[0],), generator=rng)
    eps = torch.randn(batch.shape, generator=rng, dtype=batch.dtype)
    x_t = noisify(batch, eps, t, s)
    return torch.mean((eps - d(x_t, t)) ** 2)


# ---------------------------------------------------------------------------
# Denoiser networks


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-np.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class MLPDenoiser(nn.Module):
    """Residual noise predictor for flat coordinate-like design spaces.

    The time embedding is added to every residual block, which fits sharp
    multi-modal priors markedly faster than feeding it to the input only.
    """

    def __init__(self, data_shape: tuple[int, ...], hidden: int = 128, depth: int = 3, time_dim: int = 32):
        super().__init__()
        self.data_shape = tuple(data_shape)
        self.time_dim = time_dim
        n = int(np.prod(self.data_shape))
        self.inp = nn.Linear(n, hidden)
        self.temb = nn.Sequential(nn.Linear(time_dim, hidden), nn.SiLU(), nn.Linear(hidden, hidden))
        self.blocks = nn.ModuleList([nn.Sequential(nn.SiLU(), nn.Linear(hidden, hidden)) for _ in range(depth)])
        self.out = nn.Sequential(nn.SiLU(), nn.Linear(hidden, n))
        self.config = {"kind": "mlp", "hidden": hidden, "depth": depth, "time_dim": time_dim}

    def forward(self, x_t: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        b = x_t.shape[0]
        e = self.temb(timestep_embedding(t, self.time_dim))
        h = self.inp(x_t.reshape(b, -1).float()) + e
        for blk in self.blocks:
            h = h + blk(h + e)
        return self.out(h).reshape(x_t.shape).to(x_t.dtype)


class ConvDenoiser(nn.Module):
    """Small encoder-decoder for ``(C, H, W)`` grid masks."""

    def __init__(self, data_shape: tuple[int, int, int], width: int = 32, time_dim: int = 32):
        super().__init__()
        self.data_shape = tuple(data_shape)
        c = data_shape[0]
        self.time_dim = time_dim
        self.inp = nn.Conv2d(c, width, 3, padding=1)
        self.temb = nn.Linear(time_dim, width)
        self.mid = nn.Sequential(
            nn.SiLU(), nn.Conv2d(width, width, 3, padding=1),
            nn.SiLU(), nn.Conv2d(width, width, 3, padding=1),
        )
        h, w = data_shape[1:]
        self.glob = nn.Sequential(nn.Flatten(), nn.Linear(width * h * w, width), nn.SiLU())
        self.out = nn.Sequential(nn.SiLU(), nn.Conv2d(2 * width, c, 3, padding=1))
        self.config = {"kind": "conv", "width": width, "time_dim": time_dim}

    def forward(self, x_t: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        h = self.inp(x_t.float()) + self.temb(timestep_embedding(t, self.time_dim))[:, :, None, None]
        h = self.mid(h) + h
        g = self.glob(h)[:, :, None, None].expand_as(h)
        return self.out(torch.cat([h, g], dim=1)).to(x_t.dtype)


def make_denoiser(data_shape: tuple[int, ...], kind: str = "mlp", **kw) -> nn.Module:
    if kind == "mlp":
        return MLPDenoiser(data_shape, **kw)
    if kind == "conv":
        return ConvDenoiser(data_shape, **kw)
    raise ValueError(f"unknown denoiser kind {kind!r}")


# ---------------------------------------------------------------------------
# Sampling and training


@dataclass
class DesignSample:
    data: np.ndarray
    scenario_id: str
    is_finalized: bool = False


@dataclass
class PriorTrainConfig:
    lr: float = 1e-3
    batch_size: int = 256
    grad_clip: float = 1.0
    seed: int = 0


@dataclass
class PriorTrainReport:
    losses: list[float] = field(default_factory=list)


def sample_unconditional(
    d: Callable,
    s: NoiseSchedule,
    n_steps: int,
    rng: Union[int, torch.Generator],
    batch: int = 1,
    projection=None,
    scenario_id: str = "",
    return_chain: bool = False,
):
    """Strided deterministic DDIM from ``x_T ~ N(0, I)``.

    With ``projection`` (an object exposing ``project``), each predicted noise is
    replaced by its projected counterpart before the step; results are still
    returned unfinalized.
    """
    from dicode.guidance import project_noise  # local: guidance imports this module

    if n_steps > s.T:
        raise ValueError(f"n_steps={n_steps} exceeds T={s.T}")
    if isinstance(rng, (int, np.integer)):
        rng = torch.Generator().manual_seed(int(rng))
    shape = (batch, *d.data_shape)
    x = torch.randn(shape, generator=rng)
    chain = [x.clone()]
    with torch.no_grad():
        for t, t_prev in ddim_timesteps(s.T, n_steps):
            eps = d(x, _as_steps(t, batch))
            if projection is not None:
                eps = project_noise(eps, x, t, projection, s)
            x = ddim_step(x, eps, t, t_prev, s)
            chain.append(x.clone())
    samples = [DesignSample(xi.numpy().astype(np.float64), scenario_id, False) for xi in x]
    return (samples, chain) if return_chain else samples


def train_prior(
    d: nn.Module,
    generator: Callable[[np.random.Generator, int], np.ndarray],
    n_iters: int,
    s: NoiseSchedule,
    opt_cfg: Optional[PriorTrainConfig] = None,
    report: Optional[PriorTrainReport] = None,
) -> nn.Module:
    """Fit ``d`` with the DDPM loss on minibatches drawn from ``generator(rng, n)``."""
    cfg = opt_cfg or PriorTrainConfig()
    if n_iters <= 0:
        return d
    np_rng = np.random.default_rng(cfg.seed)
    t_rng = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(d.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=n_iters, eta_min=cfg.lr * 0.1)
    d.train()
    for i in range(n_iters):
        x0 = torch.as_tensor(generator(np_rng, cfg.batch_size), dtype=torch.float32)
        loss = ddpm_loss(d, x0, s, t_rng)
        opt.zero_grad()
        loss.backward()
        nn.utils.clip_grad_norm_(d.parameters(), cfg.grad_clip)
        opt.step()
        sched.step()
        if report is not None:
            report.losses.append(float(loss.detach()))
        if i % 1000 == 0:
            log.debug("prior iter %d loss %.4f", i, float(loss.detach()))
    d.eval()
    return d


# ---------------------------------------------------------------------------
# Checkpoints


def save_denoiser(path: Union[str, Path], d: nn.Module, s: NoiseSchedule, scenario_id: str, extra: Optional[dict] = None) -> None:
    payload = {
        "state_dict": d.state_dict(),
        "data_shape": list(d.data_shape),
        "net": dict(d.config),
        "schedule": {"T": s.T, "beta_start": s.beta_start, "beta_end": s.beta_end},
        "scenario_id": scenario_id,
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    Path(path).write_bytes(DIFF_MAGIC + buf.getvalue())


def load_denoiser(path: Union[str, Path]) -> tuple[nn.Module, NoiseSchedule, str, dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(DIFF_MAGIC):
        raise ValueError(f"{path}: not a DICODE-DIFF-v1 checkpoint")
    payload = torch.load(io.BytesIO(raw[len(DIFF_MAGIC):]), weights_only=False)
    net = dict(payload["net"])
    kind = net.pop("kind")
    d = make_denoiser(tuple(payload["data_shape"]), kind, **net)
    d.load_state_dict(payload["state_dict"])
    d.eval()
    sc = payload["schedule"]
    s = make_schedule(sc["T"], sc["beta_start"], sc["beta_end"])
    return d, s, payload["scenario_id"], payload.get("extra", {})
