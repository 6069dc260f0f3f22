"""Sparse-view robustness: train each arm on uniformly subsampled training
sets and report how much the median translation error grows.

    python3 scripts/run_sparse_sweep.py --seeds 0 1 2 --fractions 1 1/10 1/20
"""

import argparse
import json
import os

from mambaloc.train import TrainConfig, make_splits, sparse_sweep


def fraction(text):
    if "/" in text:
        a, b = text.split("/")
        return float(a) / float(b)
    return float(text)


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--preset", default="desk")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--fractions", type=fraction, nargs="+", default=[1.0, 0.1, 0.05])
    ap.add_argument("--arms", nargs="+", default=["gis", "off"])
    ap.add_argument("--out", default="results/sparse")
    args = ap.parse_args()

    base = TrainConfig(preset=args.preset)
    splits = make_splits(base)
    table = {}
    for seed in args.seeds:
        runs = sparse_sweep(base.replace(seed=seed), tuple(args.fractions), tuple(args.arms), splits)
        table[seed] = {arm: {f"{f:.4f}": {"t_err": r.metrics["median_translation_error"],
                                          "r_err": r.metrics["median_rotation_error"],
                                          "degradation": r.extra["degradation"],
                                          "n_train": r.extra["n_train"]}
                             for f, r in per.items()} for arm, per in runs.items()}
        for arm, per in table[seed].items():
            cells = "  ".join(f"{f}: {v['t_err']:.3f} (x{v['degradation']:.2f})" for f, v in per.items())
            print(f"seed {seed} {arm:<9} {cells}", flush=True)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump(table, fh, indent=2)


if __name__ == "__main__":
    main()
