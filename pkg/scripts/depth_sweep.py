#!/usr/bin/env python3
"""Sweep the adapter depth and report test AUC per depth.

Mirrors the tuning-depth experiment shape: one training run per
(depth, seed) on the shipped synthetic dataset, mean +/- std per depth.

    python3 scripts/depth_sweep.py --k 4 --seeds 3 --out depth_sweep.json
"""

import argparse
import json
from dataclasses import replace

import numpy as np

from textmil.config import RunConfig, load_config
from textmil.data import build_dataset, kshot_split
from textmil.metrics import evaluate
from textmil.model import build_model
from textmil.train import fit


def run_one(cfg: RunConfig, dataset, depth: int, seed: int, k: int) -> float:
    cfg = replace(cfg, train=replace(cfg.train, depth=depth, seed=seed, shots=k))
    bags = {b.slide_id: b for b in dataset.bags}
    labels = {b.slide_id: b.label for b in dataset.bags}
    plan = kshot_split(labels, k, seed, dataset_seed=cfg.generator.seed,
                       test_per_class=cfg.generator.test_per_class,
                       val_per_class=cfg.generator.val_per_class)
    model = build_model(cfg, dataset.prompts)
    fit(model, [bags[i] for i in plan.train], [bags[i] for i in plan.val])
    return evaluate(model, [bags[i] for i in plan.test]).auc


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=None)
    ap.add_argument("--k", type=int, default=4)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--depths", type=int, nargs="*", default=None,
                    help="defaults to 1..blocks")
    ap.add_argument("--out", default="depth_sweep.json")
    args = ap.parse_args()

    cfg = load_config(args.config)
    dataset = build_dataset(cfg.generator)
    depths = args.depths or list(range(1, cfg.encoder.blocks + 1))
    rows = []
    for depth in depths:
        aucs = [run_one(cfg, dataset, depth, seed, args.k) for seed in range(args.seeds)]
        rows.append({"depth": depth, "auc_mean": float(np.mean(aucs)),
                     "auc_std": float(np.std(aucs)), "aucs": aucs})
        print(f"depth {depth:2d}: AUC {rows[-1]['auc_mean']:.4f} "
              f"+/- {rows[-1]['auc_std']:.4f}")
    best = max(rows, key=lambda r: r["auc_mean"])
    print(f"best depth {best['depth']} (AUC {best['auc_mean']:.4f})")
    with open(args.out, "w") as fh:
        json.dump({"k": args.k, "rows": rows, "config": cfg.to_dict()}, fh, indent=1,
                  sort_keys=True)


if __name__ == "__main__":
    main()
