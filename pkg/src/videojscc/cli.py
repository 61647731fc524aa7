"""Command-line entry points: ``train-jscc``, ``train-alloc``, ``eval``, ``ablate-uniform``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .config import RHO_PRESETS, ExperimentConfig, load_config
from .harness import (
    emit_outputs,
    evaluate_sweep,
    load_models,
    load_qnet,
    qnet_config,
    save_checkpoint,
    snr_grid,
    train_allocator,
    train_jscc,
)
from .metrics import METRICS
from .models import JSCCModels
from .video import DatasetManifest, load_split, read_manifest, split_dataset

logger = logging.getLogger("videojscc")


def _base_parser(sub, name: str, help: str):
    p = sub.add_parser(name, help=help)
    p.add_argument("--config", type=Path, help="flat key=value config file")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--metric", choices=METRICS, help="training/reward metric")
    p.add_argument("--out", type=Path, default=Path("runs/default"), help="output directory")
    p.add_argument("--manifest", type=Path, help="overrides the config manifest")
    return p


def _eval_flags(p):
    p.add_argument("--snr-min", type=float, default=-5.0)
    p.add_argument("--snr-max", type=float, default=20.0)
    p.add_argument("--snr-step", type=float, default=1.0)
    p.add_argument("--snr-est", default="matched", help="'matched' or a fixed estimate in dB")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--jscc", type=Path, help="JSCC checkpoint (default: <out>/jscc.pt)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="videojscc", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    _base_parser(sub, "train-jscc", "train the key/interpolation codecs and the flow estimator")
    p = _base_parser(sub, "train-alloc", "train the bandwidth allocator on frozen codecs")
    p.add_argument("--rho", type=float, choices=sorted(RHO_PRESETS), default=0.031)
    p.add_argument("--jscc", type=Path, help="JSCC checkpoint (default: <out>/jscc.pt)")
    p.add_argument("--episodes", type=int, help="overrides alloc_episodes")

    p = _base_parser(sub, "eval", "sweep SNR with one allocation policy")
    _eval_flags(p)
    p.add_argument("--rho", type=float, choices=sorted(RHO_PRESETS), default=0.031)
    p.add_argument("--policy", choices=("learned", "uniform"), default="learned")
    p.add_argument("--allocator", type=Path, help="allocator checkpoint (default: <out>/allocator_rho<rho>.pt)")

    p = _base_parser(sub, "ablate-uniform", "compare learned and uniform allocation")
    _eval_flags(p)
    p.add_argument("--rho", type=float, choices=sorted(RHO_PRESETS), default=0.031)
    p.add_argument("--allocator", type=Path)
    return parser


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    train = cfg.train
    if args.seed is not None:
        train = dataclasses.replace(train, seed=args.seed)
    if args.metric is not None:
        train = dataclasses.replace(train, metric=args.metric)
    cfg = dataclasses.replace(cfg, train=train)
    if args.manifest is not None:
        cfg = dataclasses.replace(cfg, manifest=str(args.manifest))
    return cfg


def _manifest(cfg: ExperimentConfig) -> DatasetManifest:
    if not cfg.manifest:
        raise SystemExit("no manifest: set 'manifest=' in the config or pass --manifest")
    m = read_manifest(cfg.manifest)
    if any(c.split not in ("train", "val", "test") for c in m.clips):
        m = split_dataset(m, cfg.split_seed)
    return m


def _alloc_path(args, rho: float) -> Path:
    return args.allocator if getattr(args, "allocator", None) else args.out / f"allocator_rho{rho:g}.pt"


def cmd_train_jscc(args) -> int:
    cfg = _config(args)
    m = _manifest(cfg)
    n = cfg.codec.gop_size
    train, val = load_split(m, "train", n), load_split(m, "val", n)
    torch.manual_seed(cfg.train.seed)
    models = JSCCModels(cfg.codec)
    hist = train_jscc(models, train, val, cfg.train)
    args.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(args.out / "jscc.pt", "jscc", models, cfg.codec, {"epochs": len(hist.epochs)})
    with open(args.out / "jscc_history.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=("epoch", "train_loss", "val_loss", "lr"), lineterminator="\n")
        w.writeheader()
        w.writerows(hist.epochs)
    print(f"trained {len(hist.step_loss)} steps in {hist.elapsed_s:.0f}s -> {args.out / 'jscc.pt'}")
    return 0


def cmd_train_alloc(args) -> int:
    cfg = _config(args)
    budget = RHO_PRESETS[args.rho]
    cfg = dataclasses.replace(cfg, dqn=dataclasses.replace(cfg.dqn, budget=budget))
    models = load_models(args.jscc or args.out / "jscc.pt")
    train = load_split(_manifest(cfg), "train", cfg.codec.gop_size)
    agent, logs = train_allocator(
        models, train, cfg, episodes=args.episodes, log_path=args.out / f"alloc_log_rho{args.rho:g}.csv"
    )
    path = save_checkpoint(_alloc_path(args, args.rho), "allocator", agent.qnet, qnet_config(agent.qnet),
                           {"episodes": len(logs), "rho": args.rho})
    print(f"trained {len(logs)} episodes -> {path}")
    return 0


def _sweep(args, policies):
    cfg = _config(args)
    budget = RHO_PRESETS[args.rho]
    models = load_models(args.jscc or args.out / "jscc.pt")
    qnet = load_qnet(_alloc_path(args, args.rho)) if "learned" in policies else None
    if qnet is not None and qnet.budget != budget:
        raise SystemExit(f"allocator was trained for budget {qnet.budget}, --rho {args.rho} needs {budget}")
    clips = load_split(_manifest(cfg), args.split, cfg.codec.gop_size)
    grid = snr_grid(args.snr_min, args.snr_max, args.snr_step)
    est = "matched" if args.snr_est == "matched" else float(args.snr_est)
    return evaluate_sweep(models, clips, grid, est, policies, qnet, budget, cfg.train.metric, cfg.train.seed)


def _tag(args) -> str:
    est = "matched" if args.snr_est == "matched" else f"est{float(args.snr_est):g}"
    return f"rho{args.rho:g}_{est}"


def cmd_eval(args) -> int:
    res = _sweep(args, (args.policy,))
    paths = emit_outputs(res.records, args.out, f"eval_{args.policy}_{_tag(args)}")
    print("\n".join(str(p) for p in paths))
    return 0


def cmd_ablate(args) -> int:
    res = _sweep(args, ("learned", "uniform"))
    paths = emit_outputs(res.records, args.out, f"ablation_{_tag(args)}")
    summary = {
        p: float(np.mean([r for (snr, pol), rs in res.rewards.items() if pol == p for r in rs]))
        for p in ("learned", "uniform")
    }
    (args.out / f"ablation_{_tag(args)}_reward.json").write_text(json.dumps(summary, indent=2) + "\n")
    print("\n".join(str(p) for p in paths))
    print(f"mean reward: learned {summary['learned']:.4f}  uniform {summary['uniform']:.4f}")
    return 0


COMMANDS = {"train-jscc": cmd_train_jscc, "train-alloc": cmd_train_alloc, "eval": cmd_eval, "ablate-uniform": cmd_ablate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "snr_est", "matched") != "matched":
        try:
            float(args.snr_est)
        except ValueError:
            build_parser().error(f"--snr-est must be 'matched' or a number, got {args.snr_est!r}")
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
