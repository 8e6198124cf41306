"""Empirical checks of the noisy-W2 sandwich bound and the transported-embedding error scaling.

Usage: python3 scripts/theory_report.py [--seed 0] [--d 8] [--out runs/theory]
"""

import argparse
import json
import os

import numpy as np

from rsqs.rng import substream
from rsqs.theory import lemma1_sweep, noise_rhs, thm_err_scaling


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--sigma", type=float, nargs="+", default=[0.1, 0.3])
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--grid", type=float, nargs="+", default=[0.05, 0.1, 0.2, 0.4])
    p.add_argument("--scaling-n", type=int, default=128)
    p.add_argument("--scaling-trials", type=int, default=20)
    p.add_argument("--out", default="runs/theory")
    args = p.parse_args()
    os.makedirs(args.out, exist_ok=True)

    lemma = lemma1_sweep(args.d, args.n, [(s, s) for s in args.sigma], args.trials,
                         substream(args.seed, "theory.lemma"))
    for r in lemma:
        w = np.array([t.w_sigma - t.w for t in r.trials])
        print(f"sigma {r.sigma_s}: pass {r.pass_fraction:.3f} lower {r.lower_fraction:.3f} "
              f"mean W_sigma - W {w.mean():+.4f} noise term {noise_rhs(args.d, r.sigma_s, r.sigma_q):.4f}")

    scaling = thm_err_scaling(args.d, args.scaling_n, args.grid, args.scaling_trials,
                              substream(args.seed, "theory.scaling"))
    print("sigma   predicted   mean error")
    for s, pr, e in zip(args.grid, scaling.predicted, scaling.mean_errors):
        print(f"{s:<7} {pr:<11.4f} {e:.4f}")
    print(f"correlation {scaling.correlation:.4f} monotone fraction {scaling.monotone_fraction:.3f}")

    with open(os.path.join(args.out, "theory_report.json"), "w") as f:
        json.dump({"lemma": [r.to_dict() for r in lemma], "scaling": scaling.to_dict()}, f, indent=2)


if __name__ == "__main__":
    main()
