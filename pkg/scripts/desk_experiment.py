"""Desk-scale end-to-end run: train codecs, probe trends, train the allocator, ablate.

    python scripts/make_corpus.py --out data/synthetic
    python scripts/desk_experiment.py --config configs/desk.cfg --out runs/desk
"""

import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np
import torch
from scipy.stats import spearmanr

from videojscc.config import load_config
from videojscc.harness import (
    emit_outputs, evaluate_sweep, load_models, pairwise_violations, qnet_config, refinement_curve,
    save_checkpoint, train_allocator, train_jscc,
)
from videojscc.models import JSCCModels
from videojscc.video import load_split, read_manifest


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--config", default="configs/desk.cfg")
    p.add_argument("--out", default="runs/desk")
    p.add_argument("--skip-jscc", action="store_true", help="reuse <out>/jscc.pt")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    m = read_manifest(cfg.manifest)
    n = cfg.codec.gop_size
    train, val, test = (load_split(m, s, n) for s in ("train", "val", "test"))
    summary = {}

    t0 = time.time()
    if args.skip_jscc:
        models = load_models(out / "jscc.pt")
    else:
        torch.manual_seed(cfg.train.seed)
        models = JSCCModels(cfg.codec)
        hist = train_jscc(models, train, val, cfg.train)
        save_checkpoint(out / "jscc.pt", "jscc", models, cfg.codec)
        summary["jscc_steps"] = len(hist.step_loss)
        summary["jscc_epochs"] = hist.epochs
    summary["jscc_time_s"] = time.time() - t0

    curve = np.mean([refinement_curve(models, val, snr) for snr in (-5.0, 0.0, 5.0, 10.0, 15.0, 20.0)], axis=0).tolist()
    summary["refinement_curve"] = curve
    summary["refinement_violations"] = pairwise_violations(curve)

    grid = cfg.snr_eval_grid_db
    matched = evaluate_sweep(models, val, grid, "matched")
    fixed = evaluate_sweep(models, val, grid, 6.0)
    emit_outputs(matched.records + fixed.records, out, "val_sweep")
    psnr = [r.mean for r in matched.records if r.metric == "psnr"]
    summary["matched_psnr"] = psnr
    summary["spearman"] = float(spearmanr(grid, psnr).correlation)
    summary["fixed6_psnr"] = [r.mean for r in fixed.records if r.metric == "psnr"]

    t1 = time.time()
    agent, logs = train_allocator(models, train, cfg, log_path=out / "alloc_log.csv")
    save_checkpoint(out / "allocator_rho0.031.pt", "allocator", agent.qnet, qnet_config(agent.qnet))
    summary["alloc_time_s"] = time.time() - t1
    ab = evaluate_sweep(models, test, grid, "matched", ("learned", "uniform"), agent.qnet, cfg.dqn.budget)
    emit_outputs(ab.records, out, "ablation")
    for pol in ("learned", "uniform"):
        summary[f"reward_{pol}"] = float(np.mean([r for (s, q), rs in ab.rewards.items() if q == pol for r in rs]))
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    print(json.dumps({k: v for k, v in summary.items() if k != "jscc_epochs"}, indent=1))


if __name__ == "__main__":
    main()
