"""Command-line pipeline: collect, filter, analyze, augment, train, eval, sweep.

Every value a run uses comes from built-in defaults, overridden by a JSON
config file (--config), overridden by explicit flags. Each file-producing run
writes one manifest next to its primary output recording the resolved config,
seed, and sha256 hashes of inputs and outputs, so runs are auditable and
reproducible. Relative output paths are placed under $CDT_OUT_DIR when set.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .augment import AugmentConfig, augment
from .collect import collect
from .data import (MetricConfig, TrajectoryDataset, load_dataset, save_dataset,
                   with_returns_to_go)
from .envs import ENV_NAMES, make_env
from .frontier import GridSpec, density_filter, frontier_report, grid_filter
from .model import CdtModel, preset
from .training import TrainConfig, train
from .evaluation import evaluate, sweep_target_cost, sweep_target_reward


class UsageError(Exception):
    """Bad invocation: wrong flags, missing files, inconsistent options."""


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _out_path(raw: str) -> Path:
    path = Path(raw)
    base = os.environ.get("CDT_OUT_DIR")
    if base and not path.is_absolute():
        return Path(base) / path
    return path


def _require_file(raw: str, kind: str) -> Path:
    path = Path(raw)
    if not path.is_file():
        raise UsageError(f"{kind} not found: {raw}")
    return path


def _load_ds(raw: str) -> tuple[Path, TrajectoryDataset]:
    path = _require_file(raw, "dataset")
    return path, load_dataset(path)


def _write_manifest(primary_out: Path, subcommand: str, config: dict,
                    seed, inputs: list[Path], outputs: list[Path]) -> Path:
    if primary_out.is_dir():
        manifest_path = primary_out / "manifest.json"
    else:
        manifest_path = primary_out.with_name(primary_out.name + ".manifest.json")
    manifest = {
        "tool": f"cdt {__version__}",
        "subcommand": subcommand,
        "config": config,
        "seed": seed,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p): _sha256(p) for p in outputs},
        "created_unix": time.time(),
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                             encoding="utf-8")
    return manifest_path


def _resolve(defaults: dict, args: argparse.Namespace) -> dict:
    """defaults < config file < explicit flags."""
    cfg = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        path = _require_file(config_path, "config file")
        try:
            file_cfg = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {config_path}: invalid JSON: {exc}")
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise UsageError(
                f"config file {config_path}: unknown keys {sorted(unknown)}"
            )
        cfg.update(file_cfg)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in str(text).split(",") if x.strip() != ""]
    except ValueError as exc:
        raise UsageError(f"expected a comma-separated list of numbers: {text!r}")


def _ints(text: str) -> list[int]:
    return [int(x) for x in str(text).split(",") if x.strip() != ""]


def _env_from_config(name: str, spec_overrides: dict):
    if name not in ENV_NAMES:
        raise UsageError(f"unknown environment {name!r}; choose from {ENV_NAMES}")
    return make_env(name, **spec_overrides)


# ---------------------------------------------------------------- collect

COLLECT_DEFAULTS = {
    "env": "point-circle",
    "env_spec": {},
    "risk_grid": "0,0.2,0.3,0.5,0.75,1.0",
    "episodes_per_risk": 10,
    "noise_scale": 0.05,
    "seed": 0,
}


def _cmd_collect(args) -> int:
    cfg = _resolve(COLLECT_DEFAULTS, args)
    if isinstance(cfg["env_spec"], str):
        cfg["env_spec"] = json.loads(cfg["env_spec"])
    env = _env_from_config(cfg["env"], cfg["env_spec"])
    ds = collect(env, _floats(cfg["risk_grid"]), int(cfg["episodes_per_risk"]),
                 int(cfg["seed"]), noise_scale=float(cfg["noise_scale"]))
    out = _out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    _write_manifest(out, "collect", cfg, cfg["seed"], [], [out])
    print(f"collected {len(ds)} trajectories -> {out}")
    return 0


# ---------------------------------------------------------------- filter

FILTER_DEFAULTS = {
    "mode": "grid",
    "cost_bin_width": 1.0,
    "reward_bin_width": 5.0,
    "origin": "0,0",
    "max_per_cell": 10,
    "min_count": 2,
    "seed": 0,
}


def _cmd_filter(args) -> int:
    cfg = _resolve(FILTER_DEFAULTS, args)
    in_path, ds = _load_ds(args.dataset)
    origin = _floats(cfg["origin"])
    if len(origin) != 2:
        raise UsageError("origin must be two numbers: cost,reward")
    spec = GridSpec(cost_bin_width=float(cfg["cost_bin_width"]),
                    reward_bin_width=float(cfg["reward_bin_width"]),
                    origin=(origin[0], origin[1]))
    if cfg["mode"] == "grid":
        rng = np.random.default_rng(np.random.SeedSequence(int(cfg["seed"])))
        filtered = grid_filter(ds, spec, int(cfg["max_per_cell"]), rng)
    elif cfg["mode"] == "density":
        filtered = density_filter(ds, spec, int(cfg["min_count"]))
    else:
        raise UsageError(f"filter mode must be 'grid' or 'density', got {cfg['mode']!r}")
    out = _out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(filtered, out)
    _write_manifest(out, "filter", cfg, cfg["seed"], [in_path], [out])
    print(f"kept {len(filtered)}/{len(ds)} trajectories -> {out}")
    return 0


# ---------------------------------------------------------------- analyze

ANALYZE_DEFAULTS = {
    "kappa": 10.0,
    "rf_tol": 1e-9,
}


def _cmd_analyze(args) -> int:
    cfg = _resolve(ANALYZE_DEFAULTS, args)
    in_path, ds = _load_ds(args.dataset)
    report = frontier_report(ds, float(cfg["kappa"]), rf_tol=float(cfg["rf_tol"]))
    payload = report.to_dict(ds)
    text = json.dumps(payload, indent=2) + "\n"
    sys.stdout.write(text)

    outputs: list[Path] = []
    if args.out:
        out = _out_path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")
        outputs.append(out)
    if args.points_csv:
        csv_path = _out_path(args.points_csv)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        lines = ["cost_return,reward_return"]
        lines += [f"{c!r},{r!r}" for r, c in ds.return_points]
        csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        outputs.append(csv_path)
    if outputs:
        _write_manifest(outputs[0], "analyze", cfg, None, [in_path], outputs)
    return 0


# ---------------------------------------------------------------- augment

AUGMENT_DEFAULTS = {
    "n": 500,
    "r_max_sample": None,
    "r_max_margin": 1.25,
    "beta": 1.0,
    "radius": None,
    "mode": "deterministic_argmax",
    "seed": 0,
}


def _cmd_augment(args) -> int:
    cfg = _resolve(AUGMENT_DEFAULTS, args)
    in_path, ds = _load_ds(args.dataset)
    ds = with_returns_to_go(ds)
    r_max = cfg["r_max_sample"]
    if r_max is None:
        from .augment import default_r_max_sample
        r_max = default_r_max_sample(ds, margin=float(cfg["r_max_margin"]))
    acfg = AugmentConfig(
        n_samples=int(cfg["n"]),
        r_max_sample=float(r_max),
        beta=float(cfg["beta"]),
        neighborhood_radius=None if cfg["radius"] is None else float(cfg["radius"]),
        mode=cfg["mode"],
        seed=int(cfg["seed"]),
    )
    rng = np.random.default_rng(np.random.SeedSequence(acfg.seed))
    augmented, summary = augment(ds, acfg, rng)
    out = _out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(augmented, out)
    summary_path = out.with_name(out.stem + ".summary.json")
    summary_path.write_text(json.dumps(summary.to_dict(), indent=2) + "\n",
                            encoding="utf-8")
    _write_manifest(out, "augment", {**cfg, "r_max_sample": float(r_max)},
                    acfg.seed, [in_path], [out, summary_path])
    print(f"augmented: requested={summary.requested} produced={summary.produced} "
          f"skipped={summary.skipped} -> {out}")
    return 0


# ---------------------------------------------------------------- train

TRAIN_DEFAULTS = {
    "preset": "desk",
    "head_mode": "gaussian",
    "steps": 20_000,
    "batch_size": 64,
    "context_len": 10,
    "lambda_ent": 0.1,
    "lr": 1e-4,
    "clip_norm": 0.25,
    "dropout": 0.1,
    "seed": 0,
    "checkpoint_every": 0,
    "env": None,
    "env_spec": {},
    "log_every": 500,
}


def _dataset_stats(ds: TrajectoryDataset) -> dict:
    return {
        "r_min": float(ds.reward_returns.min()),
        "r_max": float(ds.reward_returns.max()),
        "c_min": float(ds.cost_returns.min()),
        "c_max": float(ds.cost_returns.max()),
        "n_trajectories": len(ds),
    }


def _cmd_train(args) -> int:
    cfg = _resolve(TRAIN_DEFAULTS, args)
    in_path, raw_ds = _load_ds(args.dataset)
    ds = with_returns_to_go(raw_ds)
    if isinstance(cfg["env_spec"], str):
        cfg["env_spec"] = json.loads(cfg["env_spec"])

    state_dim = raw_ds[0].states.shape[1]
    action_dim = raw_ds[0].actions.shape[1]
    max_len = max(len(t) for t in ds)
    action_bound = 1.0
    env_meta = None
    if cfg["env"]:
        env = _env_from_config(cfg["env"], cfg["env_spec"])
        action_bound = env.action_bound
        env_meta = {"name": env.name, "spec": asdict(env.spec)}

    mcfg = preset(cfg["preset"], state_dim, action_dim,
                  context_len=int(cfg["context_len"]),
                  dropout=float(cfg["dropout"]),
                  head_mode=cfg["head_mode"],
                  max_episode_len=max_len,
                  action_bound=action_bound)
    rng = np.random.default_rng(np.random.SeedSequence(int(cfg["seed"])))
    model = CdtModel.init(mcfg, rng)

    tcfg = TrainConfig(
        batch_size=int(cfg["batch_size"]),
        grad_steps=int(cfg["steps"]),
        context_len=int(cfg["context_len"]),
        lambda_ent=float(cfg["lambda_ent"]),
        lr=float(cfg["lr"]),
        clip_norm=float(cfg["clip_norm"]),
        seed=int(cfg["seed"]),
        checkpoint_every=int(cfg["checkpoint_every"]),
    )
    extra = {
        "dataset_stats": _dataset_stats(raw_ds),
        "dataset_path": str(in_path),
        "dataset_sha256": _sha256(in_path),
        "env": env_meta,
        "train_config": asdict(tcfg),
    }

    out_dir = _out_path(args.checkpoint_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_every = int(cfg["log_every"])

    def log(step, stats):
        if log_every > 0 and step % log_every == 0:
            print(f"step {step}: nll={stats['nll']:.4f} "
                  f"entropy={stats['entropy']:.4f} total={stats['total']:.4f}")

    result = train(ds, model, tcfg, checkpoint_dir=out_dir,
                   checkpoint_extra=extra, log_callback=log)

    ckpt_path = out_dir / "model.ckpt"
    model.save(ckpt_path, extra=extra)
    trace_path = out_dir / "loss_trace.csv"
    trace_path.write_text(result.trace_csv(), encoding="utf-8")
    _write_manifest(out_dir, "train", {k: v for k, v in cfg.items()},
                    cfg["seed"], [in_path], [ckpt_path, trace_path])
    print(f"trained {tcfg.grad_steps} steps -> {ckpt_path}")
    return 0


# ---------------------------------------------------------------- eval / sweep

EVAL_DEFAULTS = {
    "target_reward": None,
    "target_cost": 10.0,
    "episodes": 20,
    "seeds": "0,1,2",
    "mode": "sample",
    "kappa": 10.0,
    "eps_stability": 1e-6,
    "floor_cost_target": True,
    "env": None,
    "env_spec": {},
}


def _load_model_and_env(args, cfg) -> tuple[CdtModel, object, dict, Path]:
    ckpt_path = _require_file(args.checkpoint, "checkpoint")
    model, extra = CdtModel.load(ckpt_path)
    if isinstance(cfg["env_spec"], str):
        cfg["env_spec"] = json.loads(cfg["env_spec"])
    env_name = cfg["env"]
    env_spec = cfg["env_spec"]
    if env_name is None:
        stored = extra.get("env")
        if not stored:
            raise UsageError(
                "checkpoint stores no environment; pass --env explicitly"
            )
        env_name = stored["name"]
        spec = dict(stored["spec"])
        spec.update(env_spec)
        env_spec = spec
    env = _env_from_config(env_name, env_spec)
    return model, env, extra, ckpt_path


def _metric_config(cfg, extra) -> MetricConfig:
    stats = extra.get("dataset_stats")
    if stats is None:
        raise UsageError("checkpoint lacks dataset statistics for normalization")
    return MetricConfig(kappa=float(cfg["kappa"]),
                        eps_stability=float(cfg["eps_stability"]),
                        r_min=stats["r_min"], r_max=stats["r_max"])


def _default_target_reward(cfg, extra) -> float:
    if cfg["target_reward"] is not None:
        return float(cfg["target_reward"])
    return float(extra["dataset_stats"]["r_max"])


def _cmd_eval(args) -> int:
    cfg = _resolve(EVAL_DEFAULTS, args)
    if args.no_floor:
        cfg["floor_cost_target"] = False
    model, env, extra, ckpt_path = _load_model_and_env(args, cfg)
    metric_cfg = _metric_config(cfg, extra)
    target_reward = _default_target_reward(cfg, extra)
    agg = evaluate(model, env, target_reward, float(cfg["target_cost"]),
                   int(cfg["episodes"]), _ints(cfg["seeds"]), metric_cfg,
                   mode=cfg["mode"], floor_cost_target=cfg["floor_cost_target"],
                   keep_records=False)
    payload = {
        "target_reward": target_reward,
        "target_cost": float(cfg["target_cost"]),
        "norm_reward_mean": agg.norm_reward_mean,
        "norm_reward_std": agg.norm_reward_std,
        "norm_cost_mean": agg.norm_cost_mean,
        "norm_cost_std": agg.norm_cost_std,
        "n": agg.n_episodes,
    }
    print(json.dumps(payload, indent=2))
    if args.out:
        out = _out_path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        lines = ["axis_value,norm_reward_mean,norm_reward_std,"
                 "norm_cost_mean,norm_cost_std,n",
                 f"{float(cfg['target_cost'])!r},{agg.norm_reward_mean!r},"
                 f"{agg.norm_reward_std!r},{agg.norm_cost_mean!r},"
                 f"{agg.norm_cost_std!r},{agg.n_episodes}"]
        out.write_text("\n".join(lines) + "\n", encoding="utf-8")
        meta = _sweep_metadata(cfg, ckpt_path, env, target_reward=target_reward)
        meta_path = out.with_name(out.stem + ".meta.json")
        meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                             encoding="utf-8")
        _write_manifest(out, "eval", cfg, cfg["seeds"], [ckpt_path],
                        [out, meta_path])
    return 0


SWEEP_DEFAULTS = dict(EVAL_DEFAULTS, axis="cost", grid="2.5,6,9.5,13,16.5,20")


def _sweep_metadata(cfg, ckpt_path: Path, env, **kw) -> dict:
    meta = {
        "checkpoint": str(ckpt_path),
        "checkpoint_sha256": _sha256(ckpt_path),
        "env": {"name": env.name, "spec": asdict(env.spec)},
        "floor_cost_target": cfg["floor_cost_target"],
        "mode": cfg["mode"],
        "seeds": _ints(cfg["seeds"]),
        "episodes": int(cfg["episodes"]),
        "kappa": float(cfg["kappa"]),
    }
    meta.update(kw)
    return meta


def _cmd_sweep(args) -> int:
    cfg = _resolve(SWEEP_DEFAULTS, args)
    if args.no_floor:
        cfg["floor_cost_target"] = False
    model, env, extra, ckpt_path = _load_model_and_env(args, cfg)
    metric_cfg = _metric_config(cfg, extra)
    grid = _floats(cfg["grid"])
    seeds = _ints(cfg["seeds"])
    episodes = int(cfg["episodes"])
    if cfg["axis"] == "cost":
        target_reward = _default_target_reward(cfg, extra)
        result = sweep_target_cost(model, env, grid, target_reward, episodes,
                                   seeds, metric_cfg, mode=cfg["mode"],
                                   floor_cost_target=cfg["floor_cost_target"])
        fixed = {"target_reward": target_reward}
    elif cfg["axis"] == "reward":
        result = sweep_target_reward(model, env, grid, float(cfg["target_cost"]),
                                     episodes, seeds, metric_cfg,
                                     mode=cfg["mode"],
                                     floor_cost_target=cfg["floor_cost_target"])
        fixed = {"target_cost": float(cfg["target_cost"])}
    else:
        raise UsageError(f"axis must be 'cost' or 'reward', got {cfg['axis']!r}")

    out = _out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(result.to_csv(), encoding="utf-8")
    meta = _sweep_metadata(cfg, ckpt_path, env, axis=result.axis, **fixed)
    meta_path = out.with_name(out.stem + ".meta.json")
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                         encoding="utf-8")
    _write_manifest(out, "sweep", cfg, cfg["seeds"], [ckpt_path],
                    [out, meta_path])
    print(f"sweep over {len(grid)} {result.axis} values -> {out}")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cdt",
        description="Offline safe RL pipeline: dataset collection, frontier "
                    "analysis, relabeling augmentation, returns-conditioned "
                    "transformer training and evaluation.",
    )
    parser.add_argument("--version", action="version", version=f"cdt {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add_config(p):
        p.add_argument("--config", help="JSON config file (flags override it)")

    p = sub.add_parser("collect", help="collect scripted episodes into a dataset")
    add_config(p)
    p.add_argument("--env", choices=ENV_NAMES)
    p.add_argument("--env-spec", dest="env_spec", help="JSON spec overrides")
    p.add_argument("--risk-grid", dest="risk_grid")
    p.add_argument("--episodes-per-risk", dest="episodes_per_risk", type=int)
    p.add_argument("--noise-scale", dest="noise_scale", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_collect)

    p = sub.add_parser("filter", help="grid or density down-sampling")
    add_config(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("grid", "density"))
    p.add_argument("--cost-bin-width", dest="cost_bin_width", type=float)
    p.add_argument("--reward-bin-width", dest="reward_bin_width", type=float)
    p.add_argument("--origin")
    p.add_argument("--max-per-cell", dest="max_per_cell", type=int)
    p.add_argument("--min-count", dest="min_count", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_filter)

    p = sub.add_parser("analyze", help="frontier report at a cost threshold")
    add_config(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--kappa", type=float)
    p.add_argument("--rf-tol", dest="rf_tol", type=float)
    p.add_argument("--out", help="also write the JSON report here")
    p.add_argument("--points-csv", dest="points_csv",
                   help="write all (cost, reward) return points as CSV")
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("augment", help="append relabeled trajectories")
    add_config(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--r-max-sample", dest="r_max_sample", type=float)
    p.add_argument("--r-max-margin", dest="r_max_margin", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--radius", type=float)
    p.add_argument("--mode", choices=("deterministic_argmax", "sampled_neighborhood"))
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_augment)

    p = sub.add_parser("train", help="train the transformer policy")
    add_config(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint-dir", dest="checkpoint_dir", required=True)
    p.add_argument("--preset", choices=("desk", "paper"))
    p.add_argument("--head-mode", dest="head_mode",
                   choices=("gaussian", "deterministic"))
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--context-len", dest="context_len", type=int)
    p.add_argument("--lambda-ent", dest="lambda_ent", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--clip-norm", dest="clip_norm", type=float)
    p.add_argument("--dropout", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--log-every", dest="log_every", type=int)
    p.add_argument("--env", choices=ENV_NAMES,
                   help="record this environment in the checkpoint")
    p.add_argument("--env-spec", dest="env_spec", help="JSON spec overrides")
    p.set_defaults(func=_cmd_train)

    for name, fn in (("eval", _cmd_eval), ("sweep", _cmd_sweep)):
        p = sub.add_parser(name, help=f"{name} a trained policy")
        add_config(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--env", choices=ENV_NAMES)
        p.add_argument("--env-spec", dest="env_spec", help="JSON spec overrides")
        p.add_argument("--target-reward", dest="target_reward", type=float)
        p.add_argument("--target-cost", dest="target_cost", type=float)
        p.add_argument("--episodes", type=int)
        p.add_argument("--seeds")
        p.add_argument("--mode", choices=("mean", "sample"))
        p.add_argument("--kappa", type=float)
        p.add_argument("--no-floor", dest="no_floor", action="store_true",
                       help="do not floor the cost target at zero")
        if name == "sweep":
            p.add_argument("--axis", choices=("cost", "reward"))
            p.add_argument("--grid")
            p.add_argument("--out", required=True)
        else:
            p.add_argument("--out")
        p.set_defaults(func=fn)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
