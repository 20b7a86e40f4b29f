"""Invariance of calibrated linear classifiers on Gaussian environments.

Part 1: exact root search over random environment families.
Part 2: spurious weight ratio of trained classifiers as the CLOvE weight grows.
"""

import argparse
import json
from pathlib import Path

import numpy as np

from mdcal import theory_lab as tl


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--lams", type=float, nargs="+", default=[0.0, 1.0, 10.0, 100.0])
    ap.add_argument("--steps", type=int, default=1500)
    ap.add_argument("--out", default="results/theorem1")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    roots = []
    for seed in range(args.seeds):
        cs = tl.constraint_search(tl.random_spec_a(seed=seed), num_starts=20, seed=seed)
        roots.append({"seed": seed, "residual": cs["best"]["residual"], "spurious_norm": cs["best"]["spurious_norm"],
                      "num_roots": cs["num_roots"]})
        print(f"seed {seed}: residual {roots[-1]['residual']:.1e}, ||w_sp|| {roots[-1]['spurious_norm']:.1e}")

    ratios = np.zeros((args.seeds, len(args.lams)))
    for seed in range(args.seeds):
        spec = tl.dominant_spurious_spec(seed)
        for j, lam in enumerate(args.lams):
            ratios[seed, j] = tl.train_clove_ratio(spec, lam, seed=seed, steps=args.steps)
        print(f"seed {seed}: ratios " + " ".join(f"{v:.3f}" for v in ratios[seed]))
    med = np.median(ratios, axis=0)
    monotone = bool(np.all(np.diff(med) <= 0))
    print("median ratio per lambda: " + ", ".join(f"{lam:g}: {v:.3f}" for lam, v in zip(args.lams, med)))
    print(f"median nonincreasing in lambda: {monotone}")
    per_seed = int(np.sum(np.all(np.diff(ratios, axis=1) <= 0, axis=1)))
    print(f"seeds nonincreasing in lambda: {per_seed}/{args.seeds}")

    (out / "summary.json").write_text(json.dumps(
        {"roots": roots, "lams": args.lams, "ratios": ratios.tolist(), "median": med.tolist(),
         "median_monotone": monotone, "seeds_monotone": per_seed}, indent=2) + "\n")


if __name__ == "__main__":
    main()
