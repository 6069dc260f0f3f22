"""Train the full-width model on the default synthetic scene and save the run.

    python3 scripts/train_toy.py --out results/toy
"""

import argparse
import json
import logging

from mambaloc.train import TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--gis-mode", default="gis")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="results/toy")
    args = ap.parse_args()
    logging.basicConfig(level=logging.DEBUG, format="%(message)s")
    logging.getLogger("mambaloc").setLevel(logging.DEBUG)

    rec = train(TrainConfig(preset="toy", gis_mode=args.gis_mode, seed=args.seed, out=args.out))
    print(json.dumps({"metrics": rec.metrics, "epochs_run": rec.epochs_run, "best_epoch": rec.best_epoch,
                      "n_parameters": rec.n_parameters, "wall_time_s": round(rec.wall_time, 1)}, indent=2))


if __name__ == "__main__":
    main()
