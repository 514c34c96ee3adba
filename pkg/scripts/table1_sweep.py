"""Train and evaluate every decoder configuration of the ablation table, one row each.

Each member runs at its own default resolution. With the defaults this is
14 x 3000 iterations, several hours on one CPU core; lower ``--iters`` for a
quick look.

    python3 scripts/table1_sweep.py --iters 500 --out runs/sweep
"""
import argparse
import sys

from segdec.cli import main as cli


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iters", type=int, default=3000)
    ap.add_argument("--out", default="runs/sweep")
    ap.add_argument("--build-only", action="store_true")
    args = ap.parse_args()
    argv = ["sweep", "--archs", "table1", "--iters", str(args.iters), "--out", args.out]
    return cli(argv + ["--build-only"] if args.build_only else argv)


if __name__ == "__main__":
    sys.exit(main())
