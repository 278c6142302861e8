#!/usr/bin/env python3
"""Offline k-fold cross-validation over a fused-feature manifest.

Intended for large-scale datasets where the in-repo protocol (repeated
80/20 splits) is replaced by 10-fold CV. Not wired into CI; run manually:

    python3 scripts/cross_validate.py --manifest features/manifest.json \
        --folds 10 --seed 0 --out cv_report.json
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from campvqa.cli import _load_fused_matrix  # noqa: E402
from campvqa.evaluate import krcc, plcc, srcc  # noqa: E402
from campvqa.regressor import TrainConfig, mlp_forward, train  # noqa: E402
from campvqa.store import load_manifest  # noqa: E402


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--manifest", required=True)
    parser.add_argument("--folds", type=int, default=10)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="cv_report.json")
    args = parser.parse_args()

    manifest = load_manifest(args.manifest)
    vids, features, mos = _load_fused_matrix(manifest)
    n = len(vids)
    if n < args.folds * 2:
        print(f"error: {n} videos cannot support {args.folds} folds", file=sys.stderr)
        return 1

    config = replace(TrainConfig.for_dataset_size(n), folds=args.folds, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    order = rng.permutation(n)
    fold_slices = np.array_split(order, args.folds)

    folds = []
    for k, test_idx in enumerate(fold_slices):
        train_idx = np.setdiff1d(order, test_idx)
        report = train(
            features, mos, replace(config, seed=args.seed + k),
            split=(np.sort(train_idx), np.sort(test_idx)),
        )
        pred = mlp_forward(features[test_idx], report.final_params, mode="eval")
        truth = mos[test_idx]
        folds.append(
            {
                "fold": k,
                "n_test": int(test_idx.size),
                "srcc": srcc(pred, truth),
                "plcc": plcc(pred, truth),
                "krcc": krcc(pred, truth),
                "best_val_rmse": report.best_val_rmse,
            }
        )
        print(f"fold {k}: SRCC {folds[-1]['srcc']:.4f} PLCC {folds[-1]['plcc']:.4f}")

    summary = {
        "n": n,
        "folds": folds,
        "mean": {
            metric: float(np.mean([f[metric] for f in folds]))
            for metric in ("srcc", "plcc", "krcc")
        },
        "config": config.to_dict(),
    }
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"report -> {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
