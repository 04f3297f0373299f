"""Window size and ETTR per precision plan for the DeepSeek-like profile."""

import argparse
import csv
from pathlib import Path

import numpy as np

from sparseckpt.core import PRECISION_PLANS
from sparseckpt.sim import POLICIES, Poisson, SimConfig, calibrated, run_simulation


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--mtbf", type=float, default=600.0)
    ap.add_argument("--seeds", type=int, default=4)
    ap.add_argument("--out", default="out/precision.csv")
    a = ap.parse_args()
    rows = []
    for name, plan in PRECISION_PLANS.items():
        prof = calibrated("deepseek", plan)
        for pol in POLICIES:
            runs = [run_simulation(SimConfig(prof, pol, Poisson(a.mtbf), 12 * 3600.0, 10.0, 5.0, sd))
                    for sd in range(a.seeds)]
            e = float(np.mean([m.ettr for m in runs]))
            rows.append([name, plan.full_bytes, pol, runs[0].label, f"{e:.4f}"])
            print(f"{name:<22} full={plan.full_bytes:>2}B  {pol:<9} W/I/K={runs[0].label:<5} ettr={e:.3f}")
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    with open(a.out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["precision", "full_bytes", "policy", "wsparse_or_interval", "ettr"])
        w.writerows(rows)


if __name__ == "__main__":
    main()
