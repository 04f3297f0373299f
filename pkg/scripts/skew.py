"""ETTR under skewed expert popularity at MTBF 10 min."""

import argparse
import csv
from pathlib import Path

import numpy as np

from sparseckpt.sim import POLICIES, Poisson, SimConfig, calibrated, run_simulation
from sparseckpt.workload import alpha_for_skew, sample_popularity, skewness


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--model", default="deepseek")
    ap.add_argument("--skew", type=float, nargs="+", default=[0.0, 0.25, 0.5, 0.75, 0.99])
    ap.add_argument("--seeds", type=int, default=4)
    ap.add_argument("--out", default="out/skew.csv")
    a = ap.parse_args()
    base = calibrated(a.model)
    rows = []
    for s in a.skew:
        rng = np.random.default_rng([0, int(s * 1000)])
        p = np.full(base.experts, 1 / base.experts) if s == 0 else sample_popularity(alpha_for_skew(s, base.experts),
                                                                                     base.experts, rng)
        prof = base.with_popularity(p)
        for pol in POLICIES:
            e = np.mean([run_simulation(SimConfig(prof, pol, Poisson(600.0), 12 * 3600.0, 10.0, 5.0, sd)).ettr
                         for sd in range(a.seeds)])
            rows.append([s, f"{skewness(p):.4f}", pol, f"{e:.4f}"])
            print(f"S={s:<5} realised {skewness(p):.3f}  {pol:<9} ettr={e:.3f}")
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    with open(a.out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["target_s", "realised_s", "policy", "ettr"])
        w.writerows(rows)


if __name__ == "__main__":
    main()
