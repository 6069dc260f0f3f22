"""Train a teacher, distil it into a half-width student, compare test errors.

    python3 scripts/run_distill.py --preset desk --seeds 0 1 2
"""

import argparse
import json
import os

from mambaloc.train import TrainConfig, distill, fit_model, make_splits


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--preset", default="desk")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", default="results/distill")
    args = ap.parse_args()

    base = TrainConfig(preset=args.preset)
    splits = make_splits(base)
    rows = {}
    for seed in args.seeds:
        cfg = base.replace(seed=seed)
        t_rec, teacher = fit_model(cfg, splits)
        s_rec, _ = distill(cfg, teacher, splits)
        t_err = t_rec.metrics["median_translation_error"]
        s_err = s_rec.metrics["median_translation_error"]
        rows[seed] = {"teacher": t_rec.metrics, "student": s_rec.metrics, "ratio": s_err / t_err,
                      "teacher_params": t_rec.n_parameters, "student_params": s_rec.n_parameters}
        print(f"seed {seed}: teacher {t_err:.3f} ({t_rec.n_parameters} params)  "
              f"student {s_err:.3f} ({s_rec.n_parameters} params)  ratio {s_err / t_err:.2f}", flush=True)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
