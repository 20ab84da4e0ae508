"""Versioned experiment configuration with field-level validation."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from dicode.codesign import CoDesignSchedule, PriorConfig, RunConfig, SamplerConfig
from dicode.envs import SCENARIOS, ScenarioError, make_scenario
from dicode.guidance import Anneal, GuidanceConfig
from dicode.marl import MarlConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Configuration could not be read or failed validation."""


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ScenarioBlock(_Block):
    id: str
    params: dict[str, Any] = Field(default_factory=dict)

    @field_validator("id")
    @classmethod
    def _known(cls, v: str) -> str:
        if v not in SCENARIOS:
            raise ValueError(f"unknown scenario {v!r}; expected one of {sorted(SCENARIOS)}")
        return v


class DiffusionBlock(_Block):
    T: int = Field(1000, ge=1, le=100000)
    beta_start: float = Field(1e-4, gt=0, lt=1)
    beta_end: float = Field(0.02, gt=0, lt=1)
    ddim_steps: int = Field(50, ge=1)
    pretrain_iters: int = Field(3000, ge=0)
    lr: float = Field(1e-3, gt=0)
    batch_size: int = Field(256, ge=1)
    hidden: int = Field(128, ge=1)
    width: int = Field(32, ge=1)


class GuidanceBlock(_Block):
    omega: float = Field(50.0, ge=0)
    omega_start: Optional[float] = Field(None, ge=0)
    anneal_batches: int = Field(0, ge=0)
    recurrences_k: int = Field(1, ge=1)
    backward_steps_m: int = Field(0, ge=0)
    backward_lr: float = Field(0.01, gt=0)


class MarlBlock(_Block):
    lr: float = Field(1e-3, ge=0)
    gamma: float = Field(0.99, ge=0, le=1)
    lam: float = Field(0.95, ge=0, le=1)
    clip: float = Field(0.2, gt=0, lt=1)
    epochs: int = Field(4, ge=1)
    minibatches: int = Field(4, ge=1)
    entropy_coef: float = Field(0.01, ge=0)
    value_coef: float = Field(0.5, ge=0)
    huber_delta: float = Field(1.0, gt=0)
    max_grad_norm: float = Field(1.0, gt=0)
    hidden: int = Field(64, ge=1)
    normalize_advantages: bool = False
    normalize_critic: bool = False


class CoDesignBlock(_Block):
    n_rl_iterations: int = Field(200, ge=0)
    batch_size: int = Field(16, ge=1)
    warmup_envs: int = Field(320, ge=0)
    env_repeat: int = Field(1, ge=1)
    n_distill_updates: int = Field(4, ge=0)
    distill_batch: int = Field(64, ge=1)
    m_distill: int = Field(3, ge=1)
    buffer_size: int = Field(2048, ge=1)
    env_critic_lr: float = Field(1e-3, gt=0)
    env_critic_hidden: int = Field(128, ge=1)
    eval_every: int = Field(10, ge=0)
    eval_designs: int = Field(16, ge=1)
    checkpoint_every: int = Field(25, ge=0)
    descent_restarts: int = Field(8, ge=1)
    descent_steps: int = Field(50, ge=0)
    descent_lr: float = Field(0.05, gt=0)
    topk_pool: int = Field(1024, ge=1)
    rl_lr: float = Field(0.05, gt=0)


class ExperimentConfig(_Block):
    version: int = SCHEMA_VERSION
    scenario: ScenarioBlock
    diffusion: DiffusionBlock = Field(default_factory=DiffusionBlock)
    guidance: GuidanceBlock = Field(default_factory=GuidanceBlock)
    marl: MarlBlock = Field(default_factory=MarlBlock)
    codesign: CoDesignBlock = Field(default_factory=CoDesignBlock)
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2], min_length=1)
    output_dir: str = "runs"

    @field_validator("version")
    @classmethod
    def _version(cls, v: int) -> int:
        if v != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema version {v}; expected {SCHEMA_VERSION}")
        return v

    def config_hash(self) -> str:
        blob = json.dumps(self.model_dump(exclude={"seeds", "output_dir"}), sort_keys=True)
        return hashlib.sha1(blob.encode()).hexdigest()[:16]

    def scenario_hash(self) -> str:
        blob = json.dumps(self.scenario.model_dump(), sort_keys=True)
        return hashlib.sha1(blob.encode()).hexdigest()[:16]


# Per-scenario desk-scale defaults; everything else falls back to the block defaults.
SCENARIO_DEFAULTS: dict[str, dict[str, Any]] = {
    "nav": {
        "guidance": {"omega": 50.0},
        "codesign": {"n_rl_iterations": 200, "m_distill": 1, "env_repeat": 1, "warmup_envs": 320},
    },
    "warehouse": {
        "guidance": {"omega": 10.0},
        "marl": {"lr": 1e-3},
        "codesign": {"n_rl_iterations": 150, "batch_size": 8, "env_repeat": 4, "warmup_envs": 160},
    },
    "warehouse-coord": {
        "guidance": {"omega": 10.0},
        "codesign": {"n_rl_iterations": 150, "batch_size": 8, "env_repeat": 4, "warmup_envs": 160},
    },
    "wind": {
        "guidance": {"omega": 3.0, "omega_start": 0.0, "anneal_batches": 100},
        "marl": {"normalize_advantages": True, "normalize_critic": True},
        "codesign": {"n_rl_iterations": 200, "env_repeat": 1, "m_distill": 3},
    },
}


def default_config(scenario_id: str) -> ExperimentConfig:
    if scenario_id not in SCENARIOS:
        raise ConfigError(f"unknown scenario {scenario_id!r}; expected one of {sorted(SCENARIOS)}")
    raw: dict[str, Any] = {"scenario": {"id": scenario_id, "params": {}}}
    raw.update(SCENARIO_DEFAULTS.get(scenario_id, {}))
    return ExperimentConfig.model_validate(raw)


def _format_errors(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{loc}: {e['msg']}")
    return "; ".join(lines)


def parse_config(raw: Any) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    try:
        cfg = ExperimentConfig.model_validate(raw)
    except ValidationError as err:
        raise ConfigError(_format_errors(err)) from None
    try:
        make_scenario(cfg.scenario.id, **cfg.scenario.params)
    except (TypeError, ScenarioError) as err:
        raise ConfigError(f"scenario.params: {err}") from None
    return cfg


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read {path}: {err}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ConfigError(f"{path}: malformed YAML: {err}") from None
    return parse_config(raw)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(), sort_keys=False)


def to_run_config(cfg: ExperimentConfig, method: str, seed: int, out_dir: Optional[Path] = None,
                  prior_path: Optional[Path] = None) -> RunConfig:
    scenario = make_scenario(cfg.scenario.id, **cfg.scenario.params)
    g = cfg.guidance
    anneal = Anneal(g.omega_start, g.omega, g.anneal_batches) if g.omega_start is not None else None
    c = cfg.codesign
    d = cfg.diffusion
    return RunConfig(
        scenario=scenario,
        method=method,
        seed=seed,
        out_dir=out_dir,
        prior=PriorConfig(T=d.T, beta_start=d.beta_start, beta_end=d.beta_end, pretrain_iters=d.pretrain_iters,
                          lr=d.lr, batch_size=d.batch_size, hidden=d.hidden, width=d.width),
        guidance=GuidanceConfig(omega=g.omega, recurrences_k=g.recurrences_k, backward_steps_m=g.backward_steps_m,
                                backward_lr=g.backward_lr, n_ddim_steps=d.ddim_steps, anneal=anneal),
        marl=MarlConfig(**cfg.marl.model_dump(), total_updates=max(c.n_rl_iterations, 1)),
        schedule=CoDesignSchedule(
            n_rl_iterations=c.n_rl_iterations, batch_size=c.batch_size, warmup_envs=c.warmup_envs,
            env_repeat=c.env_repeat, n_distill_updates=c.n_distill_updates, distill_batch=c.distill_batch,
            m_distill=c.m_distill, buffer_size=c.buffer_size, env_critic_lr=c.env_critic_lr,
            env_critic_hidden=c.env_critic_hidden, eval_every=c.eval_every, eval_designs=c.eval_designs,
            checkpoint_every=c.checkpoint_every,
        ),
        samplers=SamplerConfig(descent_restarts=c.descent_restarts, descent_steps=c.descent_steps,
                               descent_lr=c.descent_lr, topk_pool=c.topk_pool, rl_lr=c.rl_lr),
        prior_path=prior_path,
        config_hash=cfg.config_hash(),
    )
