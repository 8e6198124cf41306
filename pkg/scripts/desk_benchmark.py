"""Train the laptop-scale model and compare pipeline variants across shift counts.

Usage: python3 scripts/desk_benchmark.py [--seed 0] [--episodes 200] [--out runs/desk]
"""

import argparse
import json
import os
import time

from rsqs.data import gen_dataset
from rsqs.fewshot import EpisodeParams, EvalOptions, run_benchmark
from rsqs.models import save_checkpoint
from rsqs.training import desk_config, log_to_csv, train

VARIANTS = {
    "baseline": EvalOptions(use_ot=False, use_repair=False),
    "ot_only": EvalOptions(use_repair=False),
    "repair_only": EvalOptions(use_ot=False),
    "full": EvalOptions(),
}


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--episodes", type=int, default=200)
    p.add_argument("--shots", type=int, default=1)
    p.add_argument("--max-shifts", type=int, nargs="+", default=[1, 2, 4])
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", default="runs/desk")
    args = p.parse_args()
    os.makedirs(args.out, exist_ok=True)

    ds = gen_dataset(20, 100, 16, 16, seed=args.seed)
    cfg = desk_config(seed=args.seed)
    t0 = time.perf_counter()
    res = train(ds, cfg, progress=lambda r: print(f"epoch {r['epoch']:>2} val_acc {r['val_acc']:.4f}", flush=True))
    train_s = time.perf_counter() - t0
    save_checkpoint(os.path.join(args.out, "checkpoint.dual"), res.bundle)
    with open(os.path.join(args.out, "train_log.csv"), "w") as f:
        f.write(log_to_csv(res.log))
    print(f"trained {len(res.log)} epochs in {train_s:.0f}s, best epoch {res.best_epoch} val {res.best_val:.4f}")

    rows = []
    for ms in args.max_shifts:
        params = EpisodeParams(k_shot=args.shots, max_shifts=ms)
        for name, opts in VARIANTS.items():
            t0 = time.perf_counter()
            r = run_benchmark(res.bundle, ds, args.episodes, params, opts, seed=args.seed, threads=args.threads)
            rows.append({"variant": name, "max_shifts": ms, "seconds": time.perf_counter() - t0, **r.summary()})
            print(f"max_shifts {ms} {name:<12} {r.mean_acc:.4f} +- {r.ci95:.4f}", flush=True)

    with open(os.path.join(args.out, "desk_benchmark.json"), "w") as f:
        json.dump({"seed": args.seed, "train_seconds": train_s, "config": cfg.to_dict(), "results": rows}, f, indent=2)


if __name__ == "__main__":
    main()
