"""Command line entry point.

    mambaloc train --preset toy --gis-mode gis --out runs/gis
    mambaloc ablate --preset desk --seed 3 --out runs/ablate
    mambaloc bench-scan --L 256,1024,4096

Settings are resolved as defaults < ``--config`` file < explicit flags.
Exit codes: 0 success, 2 configuration error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .errors import ConfigError, NonFiniteGradient, NonFiniteLoss, NonFiniteValue

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

# flag -> TrainConfig field
FLAG_FIELDS = {
    "lr": "lr", "batch": "batch", "gis_mode": "gis_mode", "sparsity": "sparsity", "seed": "seed",
    "out": "out", "preset": "preset", "epochs": "max_epochs", "patience": "early_stop_patience",
    "data": "data_dir", "weight_decay": "weight_decay",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _common(p):
    p.add_argument("--config", help="flat key=value file")
    p.add_argument("--lr", type=str)
    p.add_argument("--batch", type=str)
    p.add_argument("--gis-mode", dest="gis_mode", type=str)
    p.add_argument("--sparsity", type=str, help="fraction, e.g. 0.1 or 1/10")
    p.add_argument("--seed", type=str)
    p.add_argument("--out", type=str)
    p.add_argument("--preset", type=str, help="toy or desk")
    p.add_argument("--epochs", type=str, help="max epochs")
    p.add_argument("--patience", type=str)
    p.add_argument("--weight-decay", dest="weight_decay", type=str)
    p.add_argument("--data", type=str, help="directory with train/ and test/ manifests")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config field")


def build_parser():
    ap = _Parser(prog="mambaloc", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    _common(sub.add_parser("train", help="train one model"))
    p = sub.add_parser("eval", help="evaluate saved weights on the test split")
    _common(p)
    p.add_argument("--weights", required=True)
    _common(sub.add_parser("ablate", help="gis / classical / off arms"))
    p = sub.add_parser("sparse-sweep", help="train on uniformly subsampled training sets")
    _common(p)
    p.add_argument("--fractions", default="1,1/10,1/20")
    p.add_argument("--arms", default="gis,off")
    p = sub.add_parser("distill", help="distil a teacher into a half-width student")
    _common(p)
    p.add_argument("--teacher", help="teacher weights (.npz); trained first when omitted")
    p.add_argument("--temperature", type=float, default=10.0)
    p.add_argument("--kl-direction", default="teacher_student",
                   choices=["teacher_student", "student_teacher"])
    p = sub.add_parser("bench-scan", help="time the scan kernels against sequence length")
    p.add_argument("--L", default="256,1024,4096,16384")
    p.add_argument("--D", type=int, default=32)
    p.add_argument("--N", type=int, default=16)
    p.add_argument("--B", type=int, default=1)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--chunk", type=int, default=64)
    p.add_argument("--no-sequential", action="store_true")
    p.add_argument("--out", help="CSV path (stdout when omitted)")
    _common(sub.add_parser("gen-data", help="render the synthetic scene to disk"))
    return ap


def resolve_config(args):
    from .train import TrainConfig, parse_config_file

    path = getattr(args, "config", None)
    if path and not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    mapping = parse_config_file(path) if path else {}
    for flag, name in FLAG_FIELDS.items():
        v = getattr(args, flag, None)
        if v is not None:
            mapping[name] = v
    for item in getattr(args, "set", []) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        mapping[k.strip()] = v.strip()
    return TrainConfig.from_mapping(mapping)


def _fraction(text):
    text = text.strip()
    try:
        if "/" in text:
            a, b = text.split("/")
            return float(a) / float(b)
        return float(text)
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"bad fraction {text!r}") from None


def _emit(obj):
    print(json.dumps(obj, indent=2, default=float))


def run(args):
    from . import train as tr

    if args.command == "bench-scan":
        Ls = [int(v) for v in args.L.split(",")]
        rows, fits = tr.bench_scan(Ls, args.D, args.N, args.B, args.reps, args.chunk,
                                   with_sequential=not args.no_sequential)
        csv = tr.bench_csv(rows)
        if args.out:
            with open(args.out, "w") as fh:
                fh.write(csv)
        else:
            sys.stdout.write(csv)
        print(json.dumps({"fits": fits}), file=sys.stderr)
        return EXIT_OK

    cfg = resolve_config(args)

    if args.command == "gen-data":
        if not cfg.out:
            raise ConfigError("gen-data needs --out")
        from .data import save_dataset
        train_set, test_set = tr.make_splits(cfg.replace(data_dir=""))
        save_dataset(os.path.join(cfg.out, "train"), train_set)
        save_dataset(os.path.join(cfg.out, "test"), test_set)
        _emit({"train": len(train_set), "test": len(test_set), "root": cfg.out})
    elif args.command == "train":
        rec = tr.train(cfg)
        _emit({"metrics": rec.metrics, "epochs_run": rec.epochs_run, "best_epoch": rec.best_epoch,
               "n_parameters": rec.n_parameters, "wall_time": rec.wall_time})
    elif args.command == "eval":
        _emit(tr.evaluate_weights(cfg, args.weights).to_dict())
    elif args.command == "ablate":
        records = tr.ablate(cfg)
        print(tr.ablation_table(records), file=sys.stderr)
        _emit({arm: {"epochs_to_threshold": r.epochs_to_threshold, "epochs_run": r.epochs_run,
                     "n_parameters": r.n_parameters, **r.metrics} for arm, r in records.items()})
    elif args.command == "sparse-sweep":
        fractions = tuple(_fraction(f) for f in args.fractions.split(","))
        arms = tuple(a.strip() for a in args.arms.split(","))
        for a in arms:
            if a not in tr.GIS_MODES:
                raise ConfigError(f"unknown arm {a!r}")
        out = tr.sparse_sweep(cfg, fractions, arms)
        _emit({arm: {f"{f:.4f}": {"degradation": r.extra["degradation"], **r.metrics}
                     for f, r in runs.items()} for arm, runs in out.items()})
    elif args.command == "distill":
        from .distill import DistillConfig
        from .model import MambaLoc

        splits = tr.make_splits(cfg)
        if args.teacher:
            teacher = MambaLoc(cfg.model_config(), seed=cfg.seed)
            teacher.load(args.teacher)
        else:
            _, teacher = tr.fit_model(cfg, splits)
        rec, _ = tr.distill(cfg, teacher, splits, DistillConfig(T=args.temperature,
                                                                kl_direction=args.kl_direction))
        _emit({"student": rec.metrics, "teacher": rec.extra["teacher_metrics"],
               "n_parameters": rec.n_parameters})
    return EXIT_OK


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteLoss, NonFiniteValue, NonFiniteGradient, FloatingPointError) as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
