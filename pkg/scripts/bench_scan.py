"""Scan wall time against sequence length, with log-log slope fits.

    python3 scripts/bench_scan.py --L 256 1024 4096 16384 --out results/bench_scan.csv
"""

import argparse
import os

from mambaloc.train import bench_csv, bench_scan


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--L", type=int, nargs="+", default=[256, 1024, 4096, 16384])
    ap.add_argument("--D", type=int, default=32)
    ap.add_argument("--N", type=int, default=16)
    ap.add_argument("--B", type=int, default=1)
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--chunk", type=int, default=64)
    ap.add_argument("--out", default="results/bench_scan.csv")
    args = ap.parse_args()

    rows, fits = bench_scan(args.L, args.D, args.N, args.B, args.reps, args.chunk)
    os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
    with open(args.out, "w") as fh:
        fh.write(bench_csv(rows))
    for r in rows:
        print(f"{r['kernel']:<10} L={r['L']:>6}  {r['mean'] * 1e3:9.3f} ms  +- {r['std'] * 1e3:.3f}")
    for name, f in sorted(fits.items()):
        print(f"{name:<10} slope {f['slope']:.3f}  r2 {f['r2']:.4f}")


if __name__ == "__main__":
    main()
