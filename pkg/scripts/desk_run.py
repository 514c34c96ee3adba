"""Overfit one batch, then train Optimal on 300 synthetic scenes and compare against the untrained network.

    python3 scripts/desk_run.py --out runs/desk
"""
import argparse
import json
import time
from pathlib import Path

import numpy as np

from segdec.arch import resolve_arch
from segdec.dataset import make_split
from segdec.graph import init_buffers, init_params
from segdec.metrics import evaluate, render_table
from segdec.training import TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--arch", default="Optimal")
    ap.add_argument("--iters", type=int, default=3000)
    ap.add_argument("--overfit-iters", type=int, default=2000)
    ap.add_argument("--lr0", type=float, default=5e-3)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--skip-overfit", action="store_true")
    ap.add_argument("--out", type=Path, default=Path("runs/desk"))
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    graph = resolve_arch(args.arch).build()
    log = lambda it, loss, lr: print(f"  iter {it:5d}  loss {loss:.4f}  lr {lr:.2e}", flush=True)
    summary = {}

    if not args.skip_overfit:
        t0 = time.perf_counter()
        fit = train(graph, make_split(4, 1, 1, seed=0).train, TrainConfig(max_iters=args.overfit_iters, lr0=args.lr0, log_every=100),
                    target_loss=0.05, on_log=log)
        summary["overfit"] = {"iterations": fit.iterations, "final_loss": fit.losses[-1][1],
                              "seconds": round(time.perf_counter() - t0, 1)}
        print("overfit:", summary["overfit"], flush=True)

    split = make_split(300, 50, 50, seed=args.seed)
    untrained = evaluate(graph, init_params(graph, 0, np.float32), init_buffers(graph, np.float32), split.val)
    res = train(graph, split.train, TrainConfig(max_iters=args.iters, lr0=args.lr0, log_every=100), out_dir=args.out, on_log=log)
    trained = evaluate(graph, res.params, res.buffers, split.val)
    print(render_table([("untrained", untrained), (args.arch, trained)]))
    summary["untrained"], summary["trained"] = untrained.to_dict(), trained.to_dict()
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
