"""The co-design loop: guided design sampling, MAPPO updates and critic distillation.

Each iteration samples a batch of designs (uniform during warmup, guided by
the environment critic afterwards), rolls the shared policy out on them,
updates the agents, and then regresses the environment critic onto the agent
critic's current value of the designs' initial states. The same rollouts feed
both learners; nothing is frozen in alternation.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from dicode.diffusion import (
    NoiseSchedule,
    PriorTrainConfig,
    load_denoiser,
    make_denoiser,
    make_schedule,
    noisify,
    save_denoiser,
    train_prior,
)
from dicode.envs.base import ScenarioSpec, design_hash, design_to_record
from dicode.guidance import (
    ChainRecord,
    GuidanceConfig,
    MLPCritic,
    NoisyCritic,
    add_style_sample,
    descent_sample,
    pug_sample,
    topk_sample,
    write_diagnostics,
)
from dicode.marl import MAPPO, AgentCritic, MarlConfig, evaluate, random_policy_return_stats, rollout

log = logging.getLogger(__name__)

METRIC_FIELDS = ["iteration", "frames", "mean_return", "distill_loss", "omega", "buffer_size", "wall_clock"]
DICODE_METHODS = ("dicode", "dicode-descent", "dicode-sampling", "dicode-add", "dicode-mc")
BASELINE_METHODS = ("fixed", "dr", "rl")


class CoDesignError(RuntimeError):
    """A training run failed; the message carries the iteration and seed."""


# ---------------------------------------------------------------------------
# Buffer and targets


@dataclass
class BufferEntry:
    theta: np.ndarray
    returns: list[float] = field(default_factory=list)


class DesignBuffer:
    """FIFO memory of the most recent designs; pushing past capacity evicts the oldest."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._q: deque[BufferEntry] = deque(maxlen=capacity)

    def push(self, theta: np.ndarray) -> BufferEntry:
        entry = BufferEntry(np.asarray(theta, dtype=np.float64).copy())
        self._q.append(entry)
        return entry

    def __len__(self) -> int:
        return len(self._q)

    def __iter__(self):
        return iter(self._q)

    def __getitem__(self, i: int) -> BufferEntry:
        return self._q[i]

    def designs(self) -> np.ndarray:
        return np.stack([e.theta for e in self._q])

    def sample(self, rng: np.random.Generator, n: int) -> list[BufferEntry]:
        if len(self._q) == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.choice(len(self._q), size=min(n, len(self._q)), replace=False)
        return [self._q[i] for i in idx]


def distill_targets(
    designs: Sequence[np.ndarray],
    scenario: ScenarioSpec,
    agent_critic: Callable[[np.ndarray], np.ndarray],
    m_distill: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Mean agent-critic value over ``m_distill`` seeded initial states per design.

    ``agent_critic`` maps stacked critic inputs ``(N, state_dim)`` to values;
    it is called with the current parameters every time, never cached.
    """
    if m_distill < 1:
        raise ValueError("m_distill must be >= 1")
    seeds = rng.integers(0, 2**31 - 1, size=(len(designs), m_distill))
    states = np.stack(
        [scenario.critic_input(scenario.instantiate(th, int(sd))) for th, row in zip(designs, seeds) for sd in row]
    )
    vals = np.asarray(agent_critic(states), dtype=np.float64)
    return vals.reshape(len(designs), m_distill).mean(axis=1)


def mc_targets(entries: Sequence[BufferEntry]) -> np.ndarray:
    """Mean logged episode return per design (the Monte Carlo ablation)."""
    out = []
    for i, e in enumerate(entries):
        if not e.returns:
            raise ValueError(f"design {i} has no logged returns")
        out.append(float(np.mean(e.returns)))
    return np.array(out)


def distill_update(
    env_critic: nn.Module,
    designs: np.ndarray,
    targets: np.ndarray,
    optimizer: torch.optim.Optimizer,
    schedule: Optional[NoiseSchedule] = None,
    rng: Optional[torch.Generator] = None,
) -> float:
    """One squared-error step of the environment critic; returns the pre-step loss.

    The loss is summed over the minibatch. When ``schedule`` is given the
    critic is time-conditioned and sees noised designs at random steps.
    """
    if len(designs) == 0:
        raise ValueError("empty minibatch")
    x = torch.as_tensor(np.asarray(designs), dtype=torch.float32)
    y = torch.as_tensor(np.asarray(targets), dtype=torch.float32)
    if schedule is None:
        pred = env_critic(x)
    else:
        t = torch.randint(1, schedule.T + 1, (len(x),), generator=rng)
        eps = torch.randn(x.shape, generator=rng)
        pred = env_critic(noisify(x, eps, t, schedule), t)
    loss = ((pred - y) ** 2).sum()
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.detach())


# ---------------------------------------------------------------------------
# Baseline generator


class ReinforceGenerator:
    """Diagonal Gaussian over the wide domain, trained by the score function.

    Samples are finalized through the scenario projection before use; the
    gradient is taken at the raw Gaussian sample, with a moving-average
    return baseline.
    """

    def __init__(self, mean: np.ndarray, std: np.ndarray, lr: float = 0.05, baseline_decay: float = 0.9):
        self.mean = torch.as_tensor(np.asarray(mean), dtype=torch.float64).clone().requires_grad_(True)
        self.log_std = torch.log(torch.as_tensor(np.maximum(np.asarray(std), 1e-3), dtype=torch.float64)).clone()
        self.log_std.requires_grad_(True)
        self.opt = torch.optim.Adam([self.mean, self.log_std], lr=lr)
        self.baseline: Optional[float] = None
        self.decay = baseline_decay

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        z = rng.standard_normal((n, *self.mean.shape))
        with torch.no_grad():
            return (self.mean + torch.exp(self.log_std) * torch.as_tensor(z)).numpy()

    def update(self, raw: np.ndarray, returns: np.ndarray) -> float:
        r = np.asarray(returns, dtype=np.float64)
        if self.baseline is None:
            self.baseline = float(r.mean())
        adv = torch.as_tensor(r - self.baseline)
        self.baseline = self.decay * self.baseline + (1 - self.decay) * float(r.mean())
        z = torch.as_tensor(np.asarray(raw))
        dist = torch.distributions.Normal(self.mean, torch.exp(self.log_std))
        logp = dist.log_prob(z).reshape(len(z), -1).sum(-1)
        loss = -(logp * adv).mean()
        self.opt.zero_grad()
        loss.backward()
        self.opt.step()
        return float(loss.detach())


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class CoDesignSchedule:
    n_rl_iterations: int = 200
    batch_size: int = 16
    warmup_envs: int = 64
    env_repeat: int = 1
    n_distill_updates: int = 4
    distill_batch: int = 64
    m_distill: int = 3
    buffer_size: int = 2048
    env_critic_lr: float = 1e-3
    env_critic_hidden: int = 128
    eval_every: int = 10
    eval_designs: int = 16
    checkpoint_every: int = 25

    def __post_init__(self):
        if self.warmup_envs < 0:
            raise ValueError("warmup_envs must be >= 0")
        if self.env_repeat < 1:
            raise ValueError("env_repeat must be >= 1")
        if self.m_distill < 1:
            raise ValueError("m_distill must be >= 1")
        if self.n_rl_iterations < 0 or self.batch_size < 1:
            raise ValueError("n_rl_iterations >= 0 and batch_size >= 1 required")


@dataclass
class PriorConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    pretrain_iters: int = 3000
    lr: float = 1e-3
    batch_size: int = 256
    hidden: int = 128
    width: int = 32


@dataclass
class SamplerConfig:
    descent_restarts: int = 8
    descent_steps: int = 50
    descent_lr: float = 0.05
    topk_pool: int = 1024
    rl_lr: float = 0.05


@dataclass
class RunConfig:
    scenario: ScenarioSpec
    method: str = "dicode"
    seed: int = 0
    out_dir: Optional[Path] = None
    prior: PriorConfig = field(default_factory=PriorConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    marl: MarlConfig = field(default_factory=MarlConfig)
    schedule: CoDesignSchedule = field(default_factory=CoDesignSchedule)
    samplers: SamplerConfig = field(default_factory=SamplerConfig)
    prior_path: Optional[Path] = None
    config_hash: str = ""

    def describe(self) -> dict:
        g = asdict(self.guidance)
        return {
            "scenario_id": self.scenario.scenario_id,
            "scenario": self.scenario.params(),
            "method": self.method,
            "seed": self.seed,
            "prior": asdict(self.prior),
            "guidance": g,
            "marl": asdict(self.marl),
            "schedule": asdict(self.schedule),
            "samplers": asdict(self.samplers),
            "config_hash": self.config_hash,
        }


@dataclass
class RunResult:
    metrics: list[dict]
    evals: list[dict]
    designs: list[np.ndarray]
    out_dir: Optional[Path]
    trainer: MAPPO
    env_critic: Optional[nn.Module] = None
    prior: Optional[nn.Module] = None

    def returns(self) -> np.ndarray:
        return np.array([m["mean_return"] for m in self.metrics])


# ---------------------------------------------------------------------------
# Prior


def uniform_generator(scenario: ScenarioSpec) -> Callable[[np.random.Generator, int], np.ndarray]:
    return lambda rng, n: scenario.uniform_batch(rng, n)


def build_prior(scenario: ScenarioSpec, cfg: PriorConfig, seed: int) -> tuple[nn.Module, NoiseSchedule]:
    torch.manual_seed(seed)
    s = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    if scenario.denoiser_kind == "conv":
        d = make_denoiser(scenario.design_shape, "conv", width=cfg.width)
    else:
        d = make_denoiser(scenario.design_shape, "mlp", hidden=cfg.hidden)
    train_prior(
        d,
        uniform_generator(scenario),
        cfg.pretrain_iters,
        s,
        PriorTrainConfig(lr=cfg.lr, batch_size=cfg.batch_size, seed=seed),
    )
    return d, s


def feasibility_census(scenario: ScenarioSpec, d: nn.Module, s: NoiseSchedule, n: int, seed: int, n_steps: int = 50):
    """Fraction of projected-DDIM samples that are feasible (to 1e-4) before finalization."""
    from dicode.diffusion import sample_unconditional

    samples = sample_unconditional(d, s, n_steps, seed, batch=n, projection=scenario.operator)
    return float(np.mean([scenario.operator.is_near_feasible(x.data) for x in samples]))


# ---------------------------------------------------------------------------
# Training loop


def _write_metrics(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in METRIC_FIELDS})


class _Loop:
    """State of one training run; kept together so it can be checkpointed."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.sc = cfg.scenario
        self.sched = cfg.schedule
        self.rng = np.random.default_rng(cfg.seed)
        self.design_rng = np.random.default_rng([cfg.seed, 1])
        self.torch_gen = torch.Generator().manual_seed(cfg.seed)
        self.trainer = MAPPO(self.sc, cfg.marl, cfg.seed)
        self.buffer = DesignBuffer(self.sched.buffer_size)
        self.metrics: list[dict] = []
        self.evals: list[dict] = []
        self.archive: list[np.ndarray] = []
        self.frames = 0
        self.n_seen = 0
        self.n_guided = 0
        self.start = time.time()
        self.prior = None
        self.s = None
        self.env_critic = None
        self.env_opt = None
        self.fixed = None
        self.generator = None
        self.diagnostics: list[ChainRecord] = []

    # -- setup -------------------------------------------------------------
    def setup(self) -> None:
        cfg, sc = self.cfg, self.sc
        method = cfg.method
        torch.manual_seed(cfg.seed)
        if method in DICODE_METHODS:
            if cfg.prior_path is not None and Path(cfg.prior_path).exists():
                self.prior, self.s, sid, _ = load_denoiser(cfg.prior_path)
                if sid != sc.scenario_id:
                    raise CoDesignError(f"prior was trained for {sid!r}, not {sc.scenario_id!r}")
            else:
                self.prior, self.s = build_prior(sc, cfg.prior, cfg.seed)
            torch.manual_seed(cfg.seed + 1)
            if method == "dicode-add":
                self.env_critic = NoisyCritic(sc.design_shape, self.sched.env_critic_hidden)
            else:
                self.env_critic = MLPCritic(sc.design_shape, self.sched.env_critic_hidden)
            self.env_opt = torch.optim.Adam(self.env_critic.parameters(), lr=self.sched.env_critic_lr)
        elif method == "fixed":
            self.fixed = sc.uniform_generate(self.design_rng)
        elif method == "rl":
            ref = sc.uniform_batch(self.design_rng, 256)
            self.generator = ReinforceGenerator(ref.mean(0), ref.std(0), lr=cfg.samplers.rl_lr)
        elif method != "dr":
            raise CoDesignError(f"unknown method {method!r}")
        if cfg.marl.normalize_critic:
            mean, std = random_policy_return_stats(
                sc, sc.uniform_batch(np.random.default_rng([cfg.seed, 2]), 16), np.random.default_rng([cfg.seed, 3]),
                cfg.marl.gamma,
            )
            self.trainer.set_return_stats(mean, std)

    # -- design sampling ---------------------------------------------------
    def _guided(self, n: int, omega: float) -> list[np.ndarray]:
        cfg, sc = self.cfg, self.sc
        method, P, v = cfg.method, sc.operator, self.env_critic
        seed = int(self.rng.integers(0, 2**31 - 1))
        if method in ("dicode", "dicode-mc"):
            out = pug_sample(self.prior, v, P, cfg.guidance, n, seed, self.s, sc.scenario_id, omega=omega)
        elif method == "dicode-add":
            out = add_style_sample(self.prior, v, cfg.guidance, seed, self.s, P, batch=n,
                                   scenario_id=sc.scenario_id, omega=omega)
        elif method == "dicode-descent":
            sp = cfg.samplers
            out = [
                descent_sample(v, P, uniform_generator(sc), sp.descent_restarts, sp.descent_steps, sp.descent_lr,
                               self.design_rng, sc.scenario_id)
                for _ in range(n)
            ]
        elif method == "dicode-sampling":
            out = topk_sample(v, uniform_generator(sc), cfg.samplers.topk_pool, n, self.design_rng, sc.scenario_id)
        else:
            raise CoDesignError(f"{method!r} has no guided sampler")
        return [x.data for x in out]

    def sample_designs(self, n: int) -> tuple[list[np.ndarray], float, Optional[np.ndarray]]:
        method, sc = self.cfg.method, self.sc
        if method == "fixed":
            return [self.fixed.copy() for _ in range(n)], 0.0, None
        if method == "dr":
            return list(sc.uniform_batch(self.design_rng, n)), 0.0, None
        if method == "rl":
            raw = self.generator.sample(self.design_rng, n)
            return [sc.operator.finalize(r) for r in raw], 0.0, raw
        if self.n_seen < self.sched.warmup_envs:
            return list(sc.uniform_batch(self.design_rng, n)), 0.0, None
        omega = self.cfg.guidance.omega_at(self.n_guided)
        self.n_guided += 1
        return self._guided(n, omega), omega, None

    # -- distillation ------------------------------------------------------
    def distill(self) -> float:
        if self.env_critic is None or len(self.buffer) == 0:
            return float("nan")
        sc, sched = self.sc, self.sched
        critic = self.trainer.critic
        losses = []
        for _ in range(sched.n_distill_updates):
            entries = self.buffer.sample(self.rng, sched.distill_batch)
            designs = np.stack([e.theta for e in entries])
            if self.cfg.method == "dicode-mc":
                y = mc_targets(entries)
            else:
                y = distill_targets(designs, sc, critic.values, sched.m_distill, self.rng)
            noisy = self.s if self.cfg.method == "dicode-add" else None
            losses.append(distill_update(self.env_critic, designs, y, self.env_opt, noisy, self.torch_gen))
        return float(np.mean(losses) / sched.distill_batch)

    # -- one iteration -----------------------------------------------------
    def iterate(self, it: int) -> dict:
        sc, sched = self.sc, self.sched
        designs, omega, raw = self.sample_designs(sched.batch_size)
        for th in designs:
            if not sc.validate(th):
                raise CoDesignError(f"iteration {it}: sampler produced an invalid design")
        entries = [self.buffer.push(th) for th in designs] if self.env_critic is not None else []
        self.archive.extend(designs)
        self.n_seen += len(designs)

        reps = [th for th in designs for _ in range(sched.env_repeat)]
        batch = rollout(sc, reps, self.trainer.policy, self.trainer.critic, self.rng)
        rets = batch.episode_returns()
        expected = sched.batch_size * sched.env_repeat * sc.horizon * sc.n_agents
        if batch.frames != expected:
            raise CoDesignError(f"iteration {it}: consumed {batch.frames} frames, expected {expected}")
        self.frames += batch.frames
        for k, e in enumerate(entries):
            e.returns.extend(rets[k * sched.env_repeat : (k + 1) * sched.env_repeat].tolist())

        if self.cfg.method == "rl" and it % 2 == 1:
            per_design = rets.reshape(len(designs), sched.env_repeat).mean(1)
            self.generator.update(raw, per_design)
        else:
            self.trainer.update(batch)
        distill_loss = self.distill()

        row = {
            "iteration": it,
            "frames": self.frames,
            "mean_return": float(rets.mean()),
            "distill_loss": distill_loss,
            "omega": omega,
            "buffer_size": len(self.buffer),
            "wall_clock": round(time.time() - self.start, 3),
        }
        self.metrics.append(row)
        if sched.eval_every > 0 and (it + 1) % sched.eval_every == 0:
            self.evals.append(self.evaluate(it))
        return row

    def evaluate(self, it: int) -> dict:
        sc, n = self.sc, self.sched.eval_designs
        eval_rng = np.random.default_rng([self.cfg.seed, 4, it])
        uniform = sc.uniform_batch(eval_rng, n)
        u_ret, _ = evaluate(sc, self.trainer.policy, uniform, 1, eval_rng, shaped=False)
        row = {"iteration": it, "uniform_return": float(u_ret.mean())}
        if self.env_critic is not None and self.n_seen >= self.sched.warmup_envs:
            omega = self.cfg.guidance.omega_at(self.n_guided)
            if self.cfg.method in ("dicode", "dicode-mc"):
                recs: list[ChainRecord] = []
                out = pug_sample(self.prior, self.env_critic, sc.operator, self.cfg.guidance, n,
                                 int(eval_rng.integers(0, 2**31 - 1)), self.s, sc.scenario_id,
                                 omega=omega, diagnostics=recs)
                guided = [x.data for x in out]
                self.diagnostics.extend(recs)
            else:
                guided = self._guided(n, omega)
            g_ret, _ = evaluate(sc, self.trainer.policy, guided, 1, eval_rng, shaped=False)
            row["guided_return"] = float(g_ret.mean())
        return row

    # -- persistence -------------------------------------------------------
    def write(self, out: Path, final: bool = False) -> None:
        out.mkdir(parents=True, exist_ok=True)
        _write_metrics(out / "metrics.csv", self.metrics)
        with open(out / "eval.jsonl", "w") as fh:
            for r in self.evals:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
        with open(out / "designs.jsonl", "w") as fh:
            per_iter = self.sched.batch_size
            for i, th in enumerate(self.archive):
                fh.write(design_to_record(th, self.sc.scenario_id, iteration=i // per_iter,
                                          hash=design_hash(th)) + "\n")
        if self.diagnostics:
            diag = out / "guidance_diagnostics.jsonl"
            diag.unlink(missing_ok=True)
            write_diagnostics(diag, self.diagnostics)
        ck = out / "checkpoints"
        ck.mkdir(exist_ok=True)
        self.trainer.save(ck / "marl.pt", self.cfg.config_hash)
        if self.env_critic is not None:
            torch.save(self.env_critic.state_dict(), ck / "env_critic.pt")
        if self.prior is not None and not (ck / "prior.pt").exists():
            save_denoiser(ck / "prior.pt", self.prior, self.s, self.sc.scenario_id,
                          {"config_hash": self.cfg.config_hash})


def run(cfg: RunConfig) -> RunResult:
    """Run one seeded training job for any method (co-design variant or baseline)."""
    loop = _Loop(cfg)
    out = Path(cfg.out_dir) if cfg.out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "run.json", "w") as fh:
            json.dump(cfg.describe(), fh, indent=2, sort_keys=True, default=str)
    it = -1
    try:
        loop.setup()
        for it in range(cfg.schedule.n_rl_iterations):
            row = loop.iterate(it)
            if it % 10 == 0:
                log.info("[%s seed=%d] it=%d return=%.3f omega=%.2f", cfg.method, cfg.seed, it,
                         row["mean_return"], row["omega"])
            if out is not None and cfg.schedule.checkpoint_every > 0 and (it + 1) % cfg.schedule.checkpoint_every == 0:
                loop.write(out)
    except Exception as exc:
        if out is not None:
            loop.write(out)
            (out / "failure.json").write_text(
                json.dumps({"iteration": it, "seed": cfg.seed, "method": cfg.method, "error": repr(exc)})
            )
        raise CoDesignError(f"{cfg.method} run failed at iteration {it} (seed={cfg.seed}): {exc}") from exc
    if out is not None:
        loop.write(out, final=True)
    return RunResult(loop.metrics, loop.evals, loop.archive, out, loop.trainer, loop.env_critic, loop.prior)


def run_dicode(cfg: RunConfig) -> RunResult:
    if cfg.method not in DICODE_METHODS:
        raise CoDesignError(f"run_dicode expects one of {DICODE_METHODS}, got {cfg.method!r}")
    return run(cfg)


def run_baseline(cfg: RunConfig, kind: str) -> RunResult:
    kind = {"rl_reinforce": "rl"}.get(kind, kind)
    if kind not in BASELINE_METHODS:
        raise CoDesignError(f"unknown baseline {kind!r}")
    cfg.method = kind
    return run(cfg)


def ema(values: Sequence[float], alpha: float = 0.95) -> np.ndarray:
    """Exponential moving average ``m_t = alpha * m_{t-1} + (1 - alpha) * x_t`` seeded at ``x_0``."""
    out = np.empty(len(values))
    m = math.nan
    for i, x in enumerate(values):
        m = x if i == 0 else alpha * m + (1 - alpha) * x
        out[i] = m
    return out
