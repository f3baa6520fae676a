#!/usr/bin/env python3
"""Ablate the text-guided refinement score across shot counts.

Trains paired models (refinement enabled vs disabled) on identical
splits and seeds and reports mean test AUC per setting.

    python3 scripts/refinement_ablation.py --shots 1 4 8 --seeds 5
"""

import argparse
import json
from dataclasses import replace

import numpy as np

from textmil.config import load_config
from textmil.data import build_dataset, kshot_split
from textmil.metrics import evaluate
from textmil.model import build_model
from textmil.train import fit


def run_one(cfg, dataset, k: int, seed: int, enabled: bool) -> float:
    cfg = replace(cfg, train=replace(cfg.train, seed=seed, shots=k),
                  refinement=replace(cfg.refinement, enabled=enabled))
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
    ap.add_argument("--shots", type=int, nargs="*", default=[1, 4])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--out", default="refinement_ablation.json")
    args = ap.parse_args()

    cfg = load_config(args.config)
    dataset = build_dataset(cfg.generator)
    rows = []
    for k in args.shots:
        for enabled in (True, False):
            aucs = [run_one(cfg, dataset, k, seed, enabled) for seed in range(args.seeds)]
            rows.append({"k": k, "refinement": enabled,
                         "auc_mean": float(np.mean(aucs)),
                         "auc_std": float(np.std(aucs)), "aucs": aucs})
            tag = "on " if enabled else "off"
            print(f"k={k} refinement {tag}: AUC {rows[-1]['auc_mean']:.4f} "
                  f"+/- {rows[-1]['auc_std']:.4f}")
    with open(args.out, "w") as fh:
        json.dump({"rows": rows, "config": cfg.to_dict()}, fh, indent=1, sort_keys=True)


if __name__ == "__main__":
    main()
