"""Command-line entry points: init, pretrain, train, evaluate, plot.

Exit codes: 0 success, 2 configuration or usage error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import multiprocessing as mp
import os
import shutil
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from dicode.analysis import adjacency_test, final_smoothed, occupancy_frequency
from dicode.codesign import (
    BASELINE_METHODS,
    DICODE_METHODS,
    CoDesignError,
    build_prior,
    feasibility_census,
    run,
)
from dicode.config import ConfigError, ExperimentConfig, default_config, dump_config, load_config, to_run_config
from dicode.diffusion import load_denoiser, save_denoiser
from dicode.envs import SCENARIOS, make_scenario, record_to_design
from dicode.marl import evaluate, load_marl

log = logging.getLogger("dicode")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
METHODS = DICODE_METHODS + BASELINE_METHODS


class UsageError(Exception):
    pass


def _prepare_out(path: Path, overwrite: bool) -> Path:
    if path.exists() and any(path.iterdir()):
        if not overwrite:
            raise UsageError(f"{path} exists and is not empty; pass --overwrite to replace it")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _workers(arg: Optional[int]) -> int:
    if arg is not None:
        return max(1, arg)
    env = os.environ.get("DICODE_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"DICODE_WORKERS must be an integer, got {env!r}") from None
    return 1


def _file_hash(path: Path) -> str:
    return hashlib.sha1(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# Commands


def cmd_init(args) -> int:
    cfg = default_config(args.scenario)
    text = f"# dicode experiment config, schema v{cfg.version}\n" + dump_config(cfg)
    if args.out is None:
        sys.stdout.write(text)
        return EXIT_OK
    out = Path(args.out)
    if out.exists() and not args.overwrite:
        raise UsageError(f"{out} exists; pass --overwrite to replace it")
    out.write_text(text)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    out = _prepare_out(Path(args.out or Path(cfg.output_dir) / "prior"), args.overwrite)
    seed = (args.seeds or cfg.seeds)[0]
    rc = to_run_config(cfg, "dicode", seed)
    d, s = build_prior(rc.scenario, rc.prior, seed)
    ck = out / "prior.pt"
    save_denoiser(ck, d, s, rc.scenario.scenario_id,
                  {"config_hash": cfg.config_hash(), "scenario_hash": cfg.scenario_hash(), "seed": seed})
    feas = feasibility_census(rc.scenario, d, s, 256, seed, cfg.diffusion.ddim_steps)
    report = {"samples": 256, "feasible_fraction": feas, "checkpoint_sha1": _file_hash(ck),
              "config_hash": cfg.config_hash()}
    (out / "feasibility.json").write_text(json.dumps(report, indent=2))
    w = csv.writer(sys.stdout)
    w.writerow(["checkpoint", "feasible_fraction", "sha1"])
    w.writerow([str(ck), f"{feas:.4f}", report["checkpoint_sha1"]])
    return EXIT_OK


def _train_one(payload: dict) -> dict:
    torch.set_num_threads(1)
    cfg = ExperimentConfig.model_validate(payload["cfg"])
    rc = to_run_config(cfg, payload["method"], payload["seed"], Path(payload["out"]),
                       Path(payload["prior"]) if payload["prior"] else None)
    res = run(rc)
    meta = json.loads((rc.out_dir / "run.json").read_text())
    meta["scenario_hash"] = cfg.scenario_hash()
    (rc.out_dir / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    rets = res.returns()
    return {
        "method": payload["method"],
        "seed": payload["seed"],
        "ema_final": final_smoothed(rets) if len(rets) else float("nan"),
        "frames": res.metrics[-1]["frames"] if res.metrics else 0,
        "out": payload["out"],
    }


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    method = args.method
    seeds = args.seeds or cfg.seeds
    root = Path(args.out or Path(cfg.output_dir)) / method
    prior = None
    if method in DICODE_METHODS:
        prior = Path(args.prior) if args.prior else Path(args.out or cfg.output_dir) / "prior" / "prior.pt"
        if not prior.exists():
            raise CoDesignError(f"no prior checkpoint at {prior}; run `dicode pretrain` first or pass --prior")
        _, _, sid, extra = load_denoiser(prior)
        if sid != cfg.scenario.id or extra.get("scenario_hash", cfg.scenario_hash()) != cfg.scenario_hash():
            raise ConfigError(f"prior at {prior} was trained for a different scenario")
    jobs = []
    for seed in seeds:
        out = _prepare_out(root / f"seed_{seed}", args.overwrite)
        jobs.append({"cfg": cfg.model_dump(), "method": method, "seed": seed, "out": str(out),
                     "prior": str(prior) if prior else None})
    n_workers = min(_workers(args.workers), len(jobs))
    if n_workers > 1:
        with mp.get_context("spawn").Pool(n_workers) as pool:
            results = pool.map(_train_one, jobs)
    else:
        results = [_train_one(j) for j in jobs]
    w = csv.writer(sys.stdout)
    w.writerow(["method", "seed", "ema_final_return", "frames", "out"])
    for r in results:
        w.writerow([r["method"], r["seed"], f"{r['ema_final']:.6f}", r["frames"], r["out"]])
    return EXIT_OK


def _seed_dirs(paths: Sequence[str]) -> list[Path]:
    out = []
    for p in map(Path, paths):
        if (p / "run.json").exists():
            out.append(p)
        else:
            found = sorted(q.parent for q in p.glob("**/run.json"))
            if not found:
                raise UsageError(f"{p}: no run directories found")
            out.extend(found)
    return out


def _read_metrics(d: Path) -> np.ndarray:
    with open(d / "metrics.csv") as fh:
        return np.array([float(r["mean_return"]) for r in csv.DictReader(fh)])


def _read_designs(d: Path) -> list[np.ndarray]:
    path = d / "designs.jsonl"
    if not path.exists():
        return []
    return [record_to_design(line)[0] for line in path.read_text().splitlines() if line.strip()]


def cmd_evaluate(args) -> int:
    run_dir = Path(args.run)
    meta = json.loads((run_dir / "run.json").read_text())
    scenario = make_scenario(meta["scenario_id"], **meta["scenario"])
    policy, _, _, _ = load_marl(run_dir / "checkpoints" / "marl.pt")
    rng = np.random.default_rng(args.seed)
    if args.designs == "archive":
        designs = _read_designs(run_dir)[-args.n:]
        if not designs:
            raise UsageError(f"{run_dir}: empty design archive")
    else:
        designs = list(scenario.uniform_batch(rng, args.n))
    mean, se = evaluate(scenario, policy, designs, args.episodes, rng, shaped=False)
    w = csv.writer(sys.stdout)
    w.writerow(["design", "mean_return", "stderr"])
    for i, (m, s) in enumerate(zip(mean, se)):
        w.writerow([i, f"{m:.6f}", f"{s:.6f}"])
    w.writerow(["all", f"{mean.mean():.6f}", f"{se.mean():.6f}"])
    return EXIT_OK


def _scenario_key(meta: dict) -> str:
    return meta.get("scenario_hash") or json.dumps([meta["scenario_id"], meta["scenario"]], sort_keys=True)


def cmd_plot(args) -> int:
    from dicode import plotting

    dirs = _seed_dirs(args.dirs)
    metas = {d: json.loads((d / "run.json").read_text()) for d in dirs}
    keys = {_scenario_key(m) for m in metas.values()}
    if len(keys) > 1:
        raise UsageError("refusing to mix runs from different scenario configurations")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    w = csv.writer(sys.stdout)

    if args.kind == "curves":
        runs: dict[str, list[np.ndarray]] = {}
        for d in dirs:
            curve = _read_metrics(d)
            if len(curve) == 0:
                raise UsageError(f"{d}: empty metrics")
            runs.setdefault(metas[d]["method"], []).append(curve)
        files = plotting.plot_curves(runs, out / "curves")
        with open(out / "curves.csv", "w", newline="") as fh:
            cw = csv.writer(fh)
            cw.writerow(["method", "seeds", "ema_final_mean"])
            for name, curves in runs.items():
                cw.writerow([name, len(curves), f"{np.mean([final_smoothed(c) for c in curves]):.6f}"])
        w.writerow(["method", "seeds", "ema_final_mean"])
        for name, curves in runs.items():
            w.writerow([name, len(curves), f"{np.mean([final_smoothed(c) for c in curves]):.6f}"])
    elif args.kind == "heatmap":
        meta = next(iter(metas.values()))
        scenario = make_scenario(meta["scenario_id"], **meta["scenario"])
        if not hasattr(scenario, "same_color_adjacency"):
            raise UsageError("heatmaps are defined for the warehouse scenarios")
        designs = [th for d in dirs for th in _read_designs(d)[-args.last:]]
        if not designs:
            raise UsageError("empty design archives")
        masks = [scenario.to_mask(th) if hasattr(scenario, "to_mask") else th for th in designs]
        freq = occupancy_frequency(masks)
        files = plotting.plot_heatmap(freq, out / "heatmap", scenario.goals, f"{len(masks)} designs")
        np.savetxt(out / "heatmap.csv", freq, delimiter=",", fmt="%.6f")
        rng = np.random.default_rng(args.seed)
        uni = [scenario.same_color_adjacency(scenario.uniform_generate(rng)) for _ in range(len(designs))]
        gen = [scenario.same_color_adjacency(th) for th in designs]
        test = adjacency_test(gen, uni)
        w.writerow(["designs", "adjacency_generated", "adjacency_uniform", "p_value"])
        w.writerow([len(designs), f"{test.mean_generated:.4f}", f"{test.mean_uniform:.4f}", f"{test.p_value:.3g}"])
    else:
        values = _sampler_values(dirs[0], args.seed, args.n)
        files = plotting.plot_method_bars(values, out / "method_bars")
        with open(out / "method_bars.csv", "w", newline="") as fh:
            cw = csv.writer(fh)
            cw.writerow(["sampler", "index", "critic_value"])
            for k, vals in values.items():
                for i, v in enumerate(vals):
                    cw.writerow([k, i, f"{v:.6f}"])
        w.writerow(["sampler", "mean_critic_value"])
        for k, vals in values.items():
            w.writerow([k, f"{np.mean(vals):.6f}"])
    for f in files:
        log.info("wrote %s", f)
    return EXIT_OK


def _sampler_values(run_dir: Path, seed: int, n: int) -> dict[str, np.ndarray]:
    """Critic values of designs from each sampler, using a trained run's critic and prior."""
    from dicode.guidance import GuidanceConfig, MLPCritic, descent_sample, pug_sample, topk_sample
    from dicode.diffusion import sample_unconditional

    meta = json.loads((run_dir / "run.json").read_text())
    ck = run_dir / "checkpoints"
    if not (ck / "env_critic.pt").exists() or not (ck / "prior.pt").exists():
        raise UsageError(f"{run_dir}: method_bars needs a co-design run with env critic and prior checkpoints")
    if meta["method"] == "dicode-add":
        raise UsageError("method_bars needs a noise-free env critic; dicode-add trains a time-conditioned one")
    scenario = make_scenario(meta["scenario_id"], **meta["scenario"])
    critic = MLPCritic(scenario.design_shape, meta["schedule"]["env_critic_hidden"])
    critic.load_state_dict(torch.load(ck / "env_critic.pt"))
    d, s, _, _ = load_denoiser(ck / "prior.pt")
    g = meta["guidance"]
    g.pop("anneal", None)
    gcfg = GuidanceConfig(**g)
    P = scenario.operator
    rng = np.random.default_rng(seed)
    gen = lambda r, k: scenario.uniform_batch(r, k)  # noqa: E731
    designs = {
        "PUG": [x.data for x in pug_sample(d, critic, P, gcfg, n, seed, s)],
        "Descent": [descent_sample(critic, P, gen, 8, 50, 0.05, rng).data for _ in range(n)],
        "Top-k": [topk_sample(critic, gen, 1024, 1, rng)[0].data for _ in range(n)],
        "Prior": [P.finalize(x.data) for x in sample_unconditional(d, s, gcfg.n_ddim_steps, seed, n, P)],
    }
    with torch.no_grad():
        return {k: critic(torch.as_tensor(np.stack(v), dtype=torch.float32)).double().numpy()
                for k, v in designs.items()}


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dicode", description="Diffusion co-design experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("init", help="write a default config for a scenario")
    q.add_argument("scenario", choices=sorted(SCENARIOS))
    q.add_argument("--out")
    q.add_argument("--overwrite", action="store_true")
    q.set_defaults(func=cmd_init)

    q = sub.add_parser("pretrain", help="train the diffusion prior on uniform designs")
    q.add_argument("--config", required=True)
    q.add_argument("--out")
    q.add_argument("--seeds", type=int, nargs="+")
    q.add_argument("--overwrite", action="store_true")
    q.set_defaults(func=cmd_pretrain)

    q = sub.add_parser("train", help="run a co-design method or baseline")
    q.add_argument("--config", required=True)
    q.add_argument("--method", required=True, choices=METHODS)
    q.add_argument("--seeds", type=int, nargs="+")
    q.add_argument("--out")
    q.add_argument("--prior")
    q.add_argument("--overwrite", action="store_true")
    q.add_argument("--workers", type=int)
    q.set_defaults(func=cmd_train)

    q = sub.add_parser("evaluate", help="evaluate a trained policy on designs")
    q.add_argument("--run", required=True)
    q.add_argument("--designs", choices=["uniform", "archive"], default="uniform")
    q.add_argument("--n", type=int, default=16)
    q.add_argument("--episodes", type=int, default=4)
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(func=cmd_evaluate)

    q = sub.add_parser("plot", help="render curves, heatmaps or sampler comparisons")
    q.add_argument("dirs", nargs="+")
    q.add_argument("--kind", required=True, choices=["curves", "heatmap", "method_bars"])
    q.add_argument("--out", required=True)
    q.add_argument("--last", type=int, default=100, help="designs per run for heatmaps")
    q.add_argument("--n", type=int, default=32, help="designs per sampler for method_bars")
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(func=cmd_plot)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as err:  # runtime failures get a distinct exit code
        print(f"runtime failure: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
