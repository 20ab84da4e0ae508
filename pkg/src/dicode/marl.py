"""Multi-agent PPO with a shared policy and a centralized team critic.

All agents share one categorical policy over their local observations. The
critic sees the scenario's global state and predicts the team return, i.e.
the sum of per-agent rewards, so its value at ``s0`` estimates the design's
expected return directly.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch
from torch import nn

from dicode.envs.base import ScenarioSpec, shaped_reward

log = logging.getLogger(__name__)

MARL_MAGIC = b"DICODE-MARL-v1\n"


class MarlError(RuntimeError):
    """Raised when an update produces a non-finite loss."""


@dataclass
class MarlConfig:
    lr: float = 3e-4
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    epochs: int = 4
    minibatches: int = 4
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    huber_delta: float = 1.0
    max_grad_norm: float = 1.0
    hidden: int = 64
    normalize_advantages: bool = False
    normalize_critic: bool = False
    total_updates: int = 100
    min_lr_frac: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.lam <= 1.0):
            raise ValueError("gamma and lam must lie in [0, 1]")
        if self.epochs < 1 or self.minibatches < 1:
            raise ValueError("epochs and minibatches must be positive")


def cosine_lr(base: float, step: int, total: int, min_frac: float = 0.0) -> float:
    """Cosine decay without restarts; holds the floor after ``total`` steps."""
    if total <= 0:
        return base
    frac = min(step, total) / total
    return base * (min_frac + (1.0 - min_frac) * 0.5 * (1.0 + math.cos(math.pi * frac)))


def _mlp(n_in: int, n_out: int, hidden: int, depth: int = 2, out_gain: float = 1.0) -> nn.Sequential:
    layers: list[nn.Module] = []
    d = n_in
    for _ in range(depth):
        lin = nn.Linear(d, hidden)
        nn.init.orthogonal_(lin.weight, math.sqrt(2))
        nn.init.zeros_(lin.bias)
        layers += [lin, nn.Tanh()]
        d = hidden
    head = nn.Linear(d, n_out)
    nn.init.orthogonal_(head.weight, out_gain)
    nn.init.zeros_(head.bias)
    layers.append(head)
    return nn.Sequential(*layers)


class Policy(nn.Module):
    """Shared categorical policy applied independently to each agent's observation."""

    def __init__(self, obs_dim: int, n_actions: int, hidden: int = 64):
        super().__init__()
        self.obs_dim, self.n_actions = obs_dim, n_actions
        self.net = _mlp(obs_dim, n_actions, hidden, out_gain=0.01)

    def forward(self, obs: torch.Tensor) -> torch.Tensor:
        return self.net(obs)

    def distribution(self, obs: torch.Tensor) -> torch.distributions.Categorical:
        return torch.distributions.Categorical(logits=self(obs))

    def probs(self, obs: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            return torch.softmax(self(torch.as_tensor(obs, dtype=torch.float32)), -1).double().numpy()


class AgentCritic(nn.Module):
    """Global state to team value, with fixed output de-normalization."""

    def __init__(self, state_dim: int, hidden: int = 64):
        super().__init__()
        self.state_dim = state_dim
        self.net = _mlp(state_dim, 1, hidden)
        self.register_buffer("ret_mean", torch.zeros(()))
        self.register_buffer("ret_std", torch.ones(()))

    def normalized(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x).squeeze(-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.normalized(x) * self.ret_std + self.ret_mean

    def values(self, states: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            return self(torch.as_tensor(states, dtype=torch.float32)).double().numpy()


# ---------------------------------------------------------------------------
# Rollouts


@dataclass
class RolloutBatch:
    obs: np.ndarray  # (E, T, n, obs_dim)
    actions: np.ndarray  # (E, T, n)
    logp: np.ndarray  # (E, T, n)
    rewards: np.ndarray  # (E, T) team reward used for learning (shaped if enabled)
    base_rewards: np.ndarray  # (E, T) team reward without shaping
    states: np.ndarray  # (E, T + 1, state_dim)
    values: np.ndarray  # (E, T + 1)
    dones: np.ndarray  # (E, T)
    seeds: np.ndarray  # (E,)
    design_index: np.ndarray  # (E,)
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None

    @property
    def n_envs(self) -> int:
        return self.rewards.shape[0]

    @property
    def frames(self) -> int:
        E, T, n = self.actions.shape
        return E * T * n

    def episode_returns(self, shaped: bool = False) -> np.ndarray:
        r = self.rewards if shaped else self.base_rewards
        return r.sum(axis=1)


def _sample_actions(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(probs.shape[:-1])[..., None]
    cdf = np.cumsum(probs, axis=-1)
    return np.minimum((cdf < u).sum(-1), probs.shape[-1] - 1)


def rollout(
    scenario: ScenarioSpec,
    designs: Sequence[np.ndarray],
    policy: Union[Policy, Callable],
    critic: Optional[AgentCritic],
    rng: np.random.Generator,
    horizon: Optional[int] = None,
    seeds: Optional[Sequence[int]] = None,
    shaping: bool = True,
    deterministic: bool = False,
) -> RolloutBatch:
    """Run one episode per design, all environments stepped in lockstep.

    ``policy`` is either a :class:`Policy` or a scripted callable
    ``state -> actions`` (its log-probabilities are recorded as zero).
    """
    E, n = len(designs), scenario.n_agents
    T = scenario.horizon if horizon is None else int(horizon)
    if seeds is None:
        seeds = rng.integers(0, 2**31 - 1, size=E)
    seeds = np.asarray(seeds, dtype=np.int64)
    states = [scenario.instantiate(th, int(sd)) for th, sd in zip(designs, seeds)]
    obs = np.zeros((E, T, n, scenario.obs_dim))
    actions = np.zeros((E, T, n), dtype=np.int64)
    logp = np.zeros((E, T, n))
    rewards = np.zeros((E, T))
    base = np.zeros((E, T))
    gstates = np.zeros((E, T + 1, scenario.state_dim))
    dones = np.zeros((E, T), dtype=bool)
    alive = np.ones(E, dtype=bool)
    cur_obs = np.stack([scenario.observe(s) for s in states])
    scripted = not isinstance(policy, nn.Module)
    for t in range(T):
        obs[:, t] = cur_obs
        gstates[:, t] = [scenario.critic_input(s) for s in states]
        if scripted:
            a = np.stack([np.asarray(policy(s), dtype=np.int64) for s in states])
        else:
            p = policy.probs(cur_obs)
            a = p.argmax(-1) if deterministic else _sample_actions(p, rng)
            logp[:, t] = np.log(np.take_along_axis(p, a[..., None], -1)[..., 0] + 1e-300)
        actions[:, t] = a
        for e in range(E):
            if not alive[e]:
                continue
            prev = states[e]
            states[e], o, r, done = scenario.step(prev, a[e])
            cur_obs[e] = o
            base[e, t] = r.sum()
            rewards[e, t] = (shaped_reward(scenario, prev, states[e], r) if shaping else r).sum()
            dones[e, t] = done or t == T - 1
            if done:
                alive[e] = False
        if not alive.any():
            obs, actions, logp = obs[:, : t + 1], actions[:, : t + 1], logp[:, : t + 1]
            rewards, base, dones = rewards[:, : t + 1], base[:, : t + 1], dones[:, : t + 1]
            gstates = gstates[:, : t + 2]
            T = t + 1
            break
    gstates[:, T] = [scenario.critic_input(s) for s in states]
    if critic is not None:
        values = critic.values(gstates.reshape(E * (T + 1), -1)).reshape(E, T + 1)
    else:
        values = np.zeros((E, T + 1))
    return RolloutBatch(
        obs=obs,
        actions=actions,
        logp=logp,
        rewards=rewards,
        base_rewards=base,
        states=gstates,
        values=values,
        dones=dones,
        seeds=seeds,
        design_index=np.arange(E),
    )


def gae(
    rewards: np.ndarray, values: np.ndarray, dones: np.ndarray, gamma: float, lam: float
) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimation over ``(E, T)`` arrays.

    ``values`` has one extra trailing entry per environment; a done step does
    not bootstrap from the next value and cuts the advantage recursion.
    """
    if not (0.0 <= gamma <= 1.0 and 0.0 <= lam <= 1.0):
        raise ValueError("gamma and lam must lie in [0, 1]")
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    nd = 1.0 - np.asarray(dones, dtype=np.float64)
    adv = np.zeros_like(r)
    last = np.zeros(r.shape[0])
    for t in reversed(range(r.shape[1])):
        delta = r[:, t] + gamma * v[:, t + 1] * nd[:, t] - v[:, t]
        last = delta + gamma * lam * nd[:, t] * last
        adv[:, t] = last
    return adv, adv + v[:, :-1]


def compute_advantages(batch: RolloutBatch, cfg: MarlConfig) -> RolloutBatch:
    batch.advantages, batch.returns = gae(batch.rewards, batch.values, batch.dones, cfg.gamma, cfg.lam)
    if not np.all(np.isfinite(batch.advantages)):
        raise MarlError("non-finite advantages")
    return batch


# ---------------------------------------------------------------------------
# Updates


def huber(x: torch.Tensor, delta: float) -> torch.Tensor:
    a = x.abs()
    return torch.where(a <= delta, 0.5 * x**2, delta * (a - 0.5 * delta))


def ppo_losses(policy: Policy, critic: AgentCritic, mb: dict, cfg: MarlConfig) -> dict:
    """Clipped surrogate, Huber critic loss and entropy on one minibatch."""
    dist = policy.distribution(mb["obs"])
    logp = dist.log_prob(mb["actions"])
    ratio = torch.exp(logp - mb["logp"])
    adv = mb["adv"]
    surr = torch.min(ratio * adv, torch.clamp(ratio, 1 - cfg.clip, 1 + cfg.clip) * adv)
    policy_loss = -surr.mean()
    entropy = dist.entropy().mean()
    pred = critic.normalized(mb["states"])
    target = (mb["returns"] - critic.ret_mean) / critic.ret_std
    value_loss = huber(pred - target, cfg.huber_delta).mean()
    total = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy
    return {"total": total, "policy": policy_loss, "value": value_loss, "entropy": entropy}


def _flatten(batch: RolloutBatch, cfg: MarlConfig) -> dict:
    E, T, n = batch.actions.shape
    adv = batch.advantages
    if cfg.normalize_advantages and adv.size > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    f32 = lambda a: torch.as_tensor(np.ascontiguousarray(a), dtype=torch.float32)  # noqa: E731
    return {
        # per-agent samples share the team advantage of their step
        "obs": f32(batch.obs.reshape(E * T * n, -1)),
        "actions": torch.as_tensor(batch.actions.reshape(-1)),
        "logp": f32(batch.logp.reshape(-1)),
        "adv": f32(np.repeat(adv.reshape(-1), n)),
        "states": f32(batch.states[:, :T].reshape(E * T, -1)),
        "returns": f32(batch.returns.reshape(-1)),
    }


def ppo_update(
    policy: Policy,
    critic: AgentCritic,
    batch: RolloutBatch,
    cfg: MarlConfig,
    optimizer: torch.optim.Optimizer,
    rng: np.random.Generator,
    lr: Optional[float] = None,
) -> dict:
    """Minibatched clipped-PPO epochs; returns mean losses of the final epoch."""
    if batch.advantages is None:
        compute_advantages(batch, cfg)
    if lr is not None:
        for g in optimizer.param_groups:
            g["lr"] = lr
    data = _flatten(batch, cfg)
    n_state = data["states"].shape[0]
    n = batch.actions.shape[2]
    params = [p for g in optimizer.param_groups for p in g["params"]]
    report: dict[str, float] = {}
    for _ in range(cfg.epochs):
        perm = rng.permutation(n_state)
        sums = {"total": 0.0, "policy": 0.0, "value": 0.0, "entropy": 0.0}
        chunks = np.array_split(perm, min(cfg.minibatches, n_state))
        for idx in chunks:
            aidx = (idx[:, None] * n + np.arange(n)[None, :]).reshape(-1)
            mb = {
                "obs": data["obs"][aidx],
                "actions": data["actions"][aidx],
                "logp": data["logp"][aidx],
                "adv": data["adv"][aidx],
                "states": data["states"][idx],
                "returns": data["returns"][idx],
            }
            losses = ppo_losses(policy, critic, mb, cfg)
            if not torch.isfinite(losses["total"]):
                raise MarlError(
                    "non-finite PPO loss: "
                    + json.dumps({k: float(v.detach()) for k, v in losses.items()})
                )
            optimizer.zero_grad()
            losses["total"].backward()
            nn.utils.clip_grad_norm_(params, cfg.max_grad_norm)
            optimizer.step()
            for k in sums:
                sums[k] += float(losses[k].detach()) / len(chunks)
        report = sums
    return report


class MAPPO:
    """Owns the shared policy, the team critic, the optimizer and the lr schedule."""

    def __init__(self, scenario: ScenarioSpec, cfg: MarlConfig, seed: int = 0):
        torch.manual_seed(seed)
        self.cfg = cfg
        self.policy = Policy(scenario.obs_dim, scenario.n_actions, cfg.hidden)
        self.critic = AgentCritic(scenario.state_dim, cfg.hidden)
        self.optimizer = torch.optim.Adam(
            list(self.policy.parameters()) + list(self.critic.parameters()), lr=cfg.lr, eps=1e-5
        )
        self.n_updates = 0
        self.rng = np.random.default_rng(seed)

    def current_lr(self) -> float:
        return cosine_lr(self.cfg.lr, self.n_updates, self.cfg.total_updates, self.cfg.min_lr_frac)

    def update(self, batch: RolloutBatch) -> dict:
        compute_advantages(batch, self.cfg)
        rep = ppo_update(self.policy, self.critic, batch, self.cfg, self.optimizer, self.rng, lr=self.current_lr())
        self.n_updates += 1
        rep["lr"] = self.optimizer.param_groups[0]["lr"]
        return rep

    def set_return_stats(self, mean: float, std: float) -> None:
        self.critic.ret_mean.fill_(float(mean))
        self.critic.ret_std.fill_(max(float(std), 1e-6))

    def save(self, path: Union[str, Path], config_hash: str = "") -> None:
        save_marl(path, self.policy, self.critic, self.cfg, config_hash)


# ---------------------------------------------------------------------------
# Evaluation and normalization


def evaluate(
    scenario: ScenarioSpec,
    policy: Union[Policy, Callable],
    designs: Sequence[np.ndarray],
    episodes_per_design: int,
    rng: np.random.Generator,
    shaped: bool = True,
    deterministic: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Mean undiscounted team return per design and its standard error."""
    if episodes_per_design < 1:
        raise ValueError("episodes_per_design must be >= 1")
    reps = [d for d in designs for _ in range(episodes_per_design)]
    batch = rollout(scenario, reps, policy, None, rng, shaping=shaped, deterministic=deterministic)
    rets = batch.episode_returns(shaped=shaped).reshape(len(designs), episodes_per_design)
    mean = rets.mean(axis=1)
    if episodes_per_design == 1:
        se = np.zeros(len(designs))
    else:
        se = rets.std(axis=1, ddof=1) / math.sqrt(episodes_per_design)
    return mean, se


def random_policy_return_stats(
    scenario: ScenarioSpec, designs: Sequence[np.ndarray], rng: np.random.Generator, gamma: float = 0.99
) -> tuple[float, float]:
    """Mean and std of discounted returns-to-go under a uniform-random policy."""
    uniform = lambda s: rng.integers(0, scenario.n_actions, size=scenario.n_agents)  # noqa: E731
    batch = rollout(scenario, designs, uniform, None, rng)
    adv, ret = gae(batch.rewards, np.zeros((batch.n_envs, batch.rewards.shape[1] + 1)), batch.dones, gamma, 1.0)
    return float(ret.mean()), float(ret.std())


# ---------------------------------------------------------------------------
# Checkpoints


def config_hash(obj) -> str:
    return hashlib.sha1(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def save_marl(path, policy: Policy, critic: AgentCritic, cfg: MarlConfig, cfg_hash: str = "") -> None:
    buf = io.BytesIO()
    torch.save(
        {
            "policy": policy.state_dict(),
            "critic": critic.state_dict(),
            "policy_dims": (policy.obs_dim, policy.n_actions),
            "critic_dim": critic.state_dim,
            "cfg": asdict(cfg),
            "config_hash": cfg_hash,
            "ret_stats": (float(critic.ret_mean), float(critic.ret_std)),
        },
        buf,
    )
    with open(path, "wb") as fh:
        fh.write(MARL_MAGIC)
        fh.write(buf.getvalue())


def load_marl(path) -> tuple[Policy, AgentCritic, MarlConfig, str]:
    with open(path, "rb") as fh:
        head = fh.read(len(MARL_MAGIC))
        if head != MARL_MAGIC:
            raise ValueError(f"{path}: not a DICODE-MARL-v1 checkpoint")
        payload = torch.load(io.BytesIO(fh.read()), weights_only=False)
    cfg = MarlConfig(**payload["cfg"])
    policy = Policy(*payload["policy_dims"], hidden=cfg.hidden)
    policy.load_state_dict(payload["policy"])
    critic = AgentCritic(payload["critic_dim"], hidden=cfg.hidden)
    critic.load_state_dict(payload["critic"])
    return policy, critic, cfg, payload["config_hash"]
