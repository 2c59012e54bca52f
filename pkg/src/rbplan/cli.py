"""``rbplan`` command line: dataset generation, training, evaluation, theory checks, sweeps.

Every subcommand resolves its options as built-in defaults, then a flat YAML
``--config`` file, then explicit flags, and writes exactly one
``manifest.json`` into its output directory.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
import time
from dataclasses import asdict, fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import yaml

from . import policies
from .agent import (FRAMES_PER_SECOND, PlannerConfig, PlannerPolicy, TrainConfig, TrainedModels, Trainer,
                    evaluate, summarize)
from .dataset import OfflineDataset, behavior_actor, collect_dataset, random_context_factory
from .netsim import InvalidConfigError, ScenarioSpec, SimConfig, config_to_dict
from .ood import run_theory_suite

log = logging.getLogger("rbplan")

SIM_DEFAULTS = {f.name: f.default for f in fields(SimConfig)}
DATASET_DEFAULTS = dict(SIM_DEFAULTS, n_episodes=200, episode_len=300, swap_prob=0.2, horizon=TrainConfig.H,
                        gamma=0.99, switch_frame=150, switch_prob=0.5, ratios=[])
TRAIN_DEFAULTS = {f.name: f.default for f in fields(TrainConfig)}
PLANNER_DEFAULTS = {f.name: f.default for f in fields(PlannerConfig)}
EVAL_DEFAULTS = dict(SIM_DEFAULTS, **PLANNER_DEFAULTS, policy="cdmp", seeds=[0, 1, 2], episodes=5, frames=100,
                     n_high=2, interference_duty=0.0, interference_channels=[], swap_prob=0.2)
BC_DEFAULTS = {f.name: f.default for f in fields(policies.BCConfig)}
THEORY_DEFAULTS = dict(instances=100, queries=1000, sigma=0.1)
SWEEP_AXES = ("omega", "xi", "sampler", "H", "K", "zeta")
SWEEP_DEFAULTS = dict(EVAL_DEFAULTS, **TRAIN_DEFAULTS, axis="omega", values=[])
BASELINES = ("oracle", "random", "uniform", "behavior", "bc")


# --- manifests ------------------------------------------------------------

def blob_hash(data: bytes) -> str:
    """git's object id for a blob with this content."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _tree_hashes(paths) -> dict:
    out = {}
    for p in paths:
        p = Path(p)
        files = sorted(f for f in p.rglob("*") if f.is_file()) if p.is_dir() else [p]
        for f in files:
            if f.name != "manifest.json":
                out[str(f)] = blob_hash(f.read_bytes())
    return out


def write_manifest(out: Path, command: str, config: dict, seed, inputs=(), started=None) -> dict:
    """RunManifest: command, resolved config, seed, artifact hashes, timestamps, input hash."""
    input_hashes = _tree_hashes(inputs)
    basis = json.dumps({"command": command, "config": config, "inputs": sorted(input_hashes.values())},
                       sort_keys=True, default=str).encode()
    artifacts = {str(Path(k).relative_to(out)): v for k, v in _tree_hashes([out]).items()}
    manifest = {
        "command": command, "config": config, "seed": seed,
        "inputs": input_hashes, "input_hash": blob_hash(basis),
        "artifacts": artifacts, "content_hash": blob_hash(json.dumps(artifacts, sort_keys=True).encode()),
        "started": started or datetime.now(timezone.utc).isoformat(),
        "finished": datetime.now(timezone.utc).isoformat(),
    }
    dump_json(out / "manifest.json", manifest)
    return manifest


def dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")


# --- option resolution ----------------------------------------------------

def _add_options(parser, defaults: dict):
    for key, val in defaults.items():
        flag = "--" + key.replace("_", "-")
        if isinstance(val, bool):
            parser.add_argument(flag, dest=key, type=lambda s: s.lower() in ("1", "true", "yes"), default=None)
        elif isinstance(val, list):
            parser.add_argument(flag, dest=key, nargs="*", default=None)
        elif val is None:
            parser.add_argument(flag, dest=key, type=float, default=None)
        else:
            parser.add_argument(flag, dest=key, type=type(val), default=None)


def resolve(args, defaults: dict) -> dict:
    cfg = dict(defaults)
    if getattr(args, "config", None):
        raw = yaml.safe_load(Path(args.config).read_text()) or {}
        if not isinstance(raw, dict):
            raise InvalidConfigError(f"{args.config}: expected a flat mapping")
        cfg.update({k: v for k, v in raw.items() if k in defaults})
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if getattr(args, "seed", None) is not None and "seed" in defaults:
        cfg["seed"] = args.seed
    for key, default in defaults.items():
        if isinstance(default, list) and cfg[key] and isinstance(cfg[key][0], str):
            cfg[key] = [_auto(v) for v in cfg[key]]
    return cfg


def _auto(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def _pick(cfg: dict, cls):
    return cls(**{f.name: type(f.default)(cfg[f.name]) if f.default is not None else cfg[f.name]
                  for f in fields(cls) if f.name in cfg})


def sim_config(cfg: dict) -> SimConfig:
    config = _pick(cfg, SimConfig)
    config.validate()
    return config


def eval_scenario(cfg: dict, config: SimConfig) -> ScenarioSpec:
    duty = float(cfg.get("interference_duty", 0.0))
    channels = cfg.get("interference_channels") or []
    if duty > 0 and not channels:
        channels = list(range(math.ceil(config.n_channels / 2)))
    scenario = ScenarioSpec.static(int(cfg["n_high"]), interference_channels=channels, interference_duty=duty)
    scenario.validate(config)
    return scenario


# --- commands -------------------------------------------------------------

def cmd_gen_dataset(cfg: dict, seed: int, out: Path) -> OfflineDataset:
    config = sim_config(cfg)
    if int(cfg["episode_len"]) < 2:
        raise InvalidConfigError("episode_len must be >= 2 (a trajectory needs at least two states)")
    factory = random_context_factory(config, ratios=cfg["ratios"] or None,
                                     switch_frame=cfg["switch_frame"], switch_prob=cfg["switch_prob"])
    ds = collect_dataset(factory, behavior_actor(cfg["swap_prob"]), int(cfg["n_episodes"]),
                         int(cfg["episode_len"]), seed, horizon=int(cfg["horizon"]), gamma=float(cfg["gamma"]),
                         meta={"sim_config": config_to_dict(config), "swap_prob": cfg["swap_prob"]})
    ds.save(out)
    return ds


def _load_dataset(path) -> OfflineDataset:
    if path is None or not (Path(path) / "meta.json").exists():
        raise FileNotFoundError(f"missing-dataset: {path}")
    return OfflineDataset.load(path)


def write_losses(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "diffusion_loss", "invdyn_loss", "ood_penalty", "total"])
        for row in history:
            w.writerow([row["epoch"], row["diffusion_loss"], row["invdyn_loss"], row["ood_penalty"], row["total"]])


def cmd_train(dataset_dir, cfg: dict, out: Path, resume: bool = False) -> TrainedModels:
    """Train with a resumable state file written after every epoch."""
    ds = _load_dataset(dataset_dir)
    tcfg = _pick(cfg, TrainConfig)
    trainer = Trainer(ds, tcfg)
    state_path = out / "trainer_state.pt"
    if resume and state_path.exists():
        trainer.load_state(state_path)
        log.info("resumed at epoch %d", trainer.epoch)
    out.mkdir(parents=True, exist_ok=True)
    while trainer.epoch < tcfg.epochs:
        trainer.run_epoch()
        trainer.save_state(state_path)
        write_losses(out / "losses.csv", trainer.history)
    write_losses(out / "losses.csv", trainer.history)
    models = trainer.models()
    models.save(out / "model")
    return models


def build_policy(cfg: dict, checkpoint):
    """Return ``(factory, joint, planner_policies)`` for the requested policy name."""
    name = cfg["policy"]
    made = []
    if name in ("cdmp", "cdmp_pen", "planner"):
        if checkpoint is None:
            raise FileNotFoundError("missing-checkpoint: planner evaluation needs --checkpoint")
        models = TrainedModels.load(Path(checkpoint) / "model" if (Path(checkpoint) / "model").exists()
                                    else checkpoint)
        planner = _pick(cfg, PlannerConfig)

        def factory(seed):
            made.append(PlannerPolicy(models, planner, seed))
            return made[-1]
        return factory, True, made
    if name == "bc":
        if checkpoint is None:
            raise FileNotFoundError("missing-checkpoint: bc evaluation needs --checkpoint")
        bc = policies.BCModel.load(checkpoint)
        return bc.policy, True, made
    if name == "behavior":
        return (lambda seed: policies.behavior(seed, cfg["swap_prob"])), False, made
    if name in ("oracle", "random", "uniform"):
        return getattr(policies, name), False, made
    raise InvalidConfigError(f"unknown policy {name!r}; choose cdmp or one of {BASELINES}")


EPISODE_FIELDS = ["policy", "scenario", "seed", "episode", "frames", "reward", "throughput", "delay", "loss_rate"]
FRAME_FIELDS = ["policy", "scenario", "seed", "episode", "frame", "reward", "throughput", "delay", "loss_rate"]


def cmd_evaluate(cfg: dict, checkpoint, out: Path) -> dict:
    config = sim_config(cfg)
    scenario = eval_scenario(cfg, config)
    factory, joint, made = build_policy(cfg, checkpoint)
    seeds = [int(s) for s in cfg["seeds"]]
    t0 = time.perf_counter()
    results = evaluate(factory, config, scenario, seeds, int(cfg["episodes"]), int(cfg["frames"]), joint=joint)
    wall = time.perf_counter() - t0
    tag = f"n_high={cfg['n_high']},duty={float(cfg['interference_duty'])}"
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "episodes.csv", "w", newline="") as fe, open(out / "frames.csv", "w", newline="") as ff:
        we, wf = csv.writer(fe), csv.writer(ff)
        we.writerow(EPISODE_FIELDS)
        wf.writerow(FRAME_FIELDS)
        for seed, eps in results.items():
            for i, ep in enumerate(eps):
                q = ep.qos()
                we.writerow([cfg["policy"], tag, seed, i, len(ep.rewards), q["reward"], q["throughput"],
                             q["delay"], q["loss_rate"]])
                for f, (r, m) in enumerate(zip(ep.rewards, ep.metrics)):
                    wf.writerow([cfg["policy"], tag, seed, i, f, r, m.delivered, m.mean_delay, m.loss_rate])
    summary = summarize(results)
    summary.update(policy=cfg["policy"], scenario=tag, wall_time=wall,
                   episode_seconds=int(cfg["frames"]) / FRAMES_PER_SECOND)
    if made:
        calls = sum(p.n_calls for p in made)
        summary["time_per_action"] = sum(p.time_spent for p in made) / max(calls, 1)
    dump_json(out / "summary.json", summary)
    return summary


def cmd_bc_baseline(dataset_dir, cfg: dict, out: Path):
    ds = _load_dataset(dataset_dir)
    model = policies.train_bc(ds, _pick(cfg, policies.BCConfig))
    model.save(out)
    return model


def cmd_verify_theory(cfg: dict, seed: int, out: Path) -> dict:
    report = run_theory_suite(int(cfg["instances"]), int(cfg["queries"]), float(cfg["sigma"]), seed)
    out.mkdir(parents=True, exist_ok=True)
    dump_json(out / "theory_report.json", report)
    return report


def cmd_sweep(dataset_dir, cfg: dict, checkpoint, out: Path) -> list:
    """One axis, several values; planner-only axes reuse a single trained model."""
    axis = cfg["axis"]
    if axis not in SWEEP_AXES:
        raise InvalidConfigError(f"invalid-axis: {axis!r} not in {SWEEP_AXES}")
    values = list(cfg["values"])
    if not values:
        raise InvalidConfigError("sweep needs at least one value")
    retrain = axis in ("H", "K", "zeta")
    rows = []
    shared = checkpoint
    if not retrain and shared is None:
        shared = out / "model_shared"
        cmd_train(dataset_dir, cfg, shared)
    for value in values:
        sub = out / f"{axis}={value}"
        run = dict(cfg, policy="cdmp", **{axis: value})
        if axis == "zeta":
            run["variant"] = "cdmp_pen" if float(value) > 0 else "cdmp"
        ckpt = shared
        if retrain:
            ckpt = sub / "train"
            cmd_train(dataset_dir, run, ckpt)
        summary = cmd_evaluate(run, ckpt, sub / "eval")
        rows.append({"axis": axis, "value": value, "reward_mean": summary["reward_mean"],
                     "reward_std": summary["reward_std"], "seed_reward_std": summary["seed_reward_std"],
                     "time_per_action": summary.get("time_per_action", float("nan"))})
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return rows


# --- entry point ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rbplan", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, defaults, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat YAML file of option values")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=True, help="output directory")
        _add_options(p, {k: v for k, v in defaults.items() if k != "seed"})
        return p

    command("gen-dataset", DATASET_DEFAULTS, "collect an offline behavior-policy dataset")
    p = command("train", TRAIN_DEFAULTS, "train the diffusion planner")
    p.add_argument("--dataset", required=True)
    p.add_argument("--resume", action="store_true", help="continue from OUT/trainer_state.pt")
    p = command("evaluate", EVAL_DEFAULTS, "evaluate a planner or baseline on the static scenario")
    p.add_argument("--checkpoint")
    command("verify-theory", THEORY_DEFAULTS, "check the distance-to-data identities and the error bound")
    p = command("sweep", SWEEP_DEFAULTS, "ablation over one axis")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", help="reuse this model for planner-only axes")
    p = command("bc-baseline", BC_DEFAULTS, "train the behavior-cloning baseline")
    p.add_argument("--dataset", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    out = Path(args.out)
    started = datetime.now(timezone.utc).isoformat()
    seed = args.seed if args.seed is not None else 0
    try:
        if args.command == "gen-dataset":
            cfg = resolve(args, DATASET_DEFAULTS)
            cmd_gen_dataset(cfg, seed, out)
            inputs = [args.config] if args.config else []
        elif args.command == "train":
            cfg = resolve(args, dict(TRAIN_DEFAULTS, seed=seed))
            cmd_train(args.dataset, cfg, out, resume=args.resume)
            inputs = [args.dataset] + ([args.config] if args.config else [])
        elif args.command == "evaluate":
            cfg = resolve(args, EVAL_DEFAULTS)
            summary = cmd_evaluate(cfg, args.checkpoint, out)
            print(json.dumps({k: summary[k] for k in ("reward_mean", "reward_std", "seed_reward_std")},
                             sort_keys=True))
            inputs = [args.checkpoint] if args.checkpoint else []
        elif args.command == "verify-theory":
            cfg = resolve(args, THEORY_DEFAULTS)
            report = cmd_verify_theory(cfg, seed, out)
            write_manifest(out, args.command, cfg, seed, started=started)
            print(json.dumps({"ok": report["ok"]}, sort_keys=True))
            return 0 if report["ok"] else 1
        elif args.command == "sweep":
            cfg = resolve(args, dict(SWEEP_DEFAULTS, seed=seed))
            cmd_sweep(args.dataset, cfg, args.checkpoint, out)
            inputs = [args.dataset] + ([args.checkpoint] if args.checkpoint else [])
        else:
            cfg = resolve(args, dict(BC_DEFAULTS, seed=seed))
            cmd_bc_baseline(args.dataset, cfg, out)
            inputs = [args.dataset]
    except (FileNotFoundError, InvalidConfigError, ValueError, FloatingPointError) as exc:
        print(f"rbplan {args.command}: error: {exc}", file=sys.stderr)
        return 2
    write_manifest(out, args.command, cfg, seed, inputs=inputs, started=started)
    return 0


if __name__ == "__main__":
    sys.exit(main())
