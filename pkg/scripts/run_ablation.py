"""Three-arm GIS ablation (gis / classical / off) over several seeds.

    python3 scripts/run_ablation.py --preset desk --seeds 0 1 2 3 4 --out results/ablation
"""

import argparse
import json
import os

from mambaloc.train import TrainConfig, ablate, ablation_table, make_splits


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--preset", default="desk")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--out", default="results/ablation")
    args = ap.parse_args()

    base = TrainConfig(preset=args.preset)
    splits = make_splits(base)
    summary = {}
    wins = 0
    for seed in args.seeds:
        recs = ablate(base.replace(seed=seed, out=os.path.join(args.out, f"seed{seed}")), splits)
        print(f"seed {seed}\n{ablation_table(recs)}\n", flush=True)
        e_gis, e_off = recs["gis"].epochs_to_threshold, recs["off"].epochs_to_threshold
        wins += e_gis is not None and (e_off is None or e_gis <= e_off)
        summary[seed] = {arm: {"epochs_to_threshold": r.epochs_to_threshold, "epochs_run": r.epochs_run,
                               "best_val": min(r.val_losses), **r.metrics} for arm, r in recs.items()}
    print(f"gis reached the threshold no later than off in {wins}/{len(args.seeds)} seeds")
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)


if __name__ == "__main__":
    main()
