"""Replay the bundled 24-failure / 6 h trace against every policy."""

import argparse
from pathlib import Path

import numpy as np

from sparseckpt.config import bundled
from sparseckpt.sim import POLICIES, calibrated, read_trace
from sparseckpt.sim.sweep import goodput_csv, trace_replay


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--trace", default=str(bundled("trace_24_events_6h.csv")))
    ap.add_argument("--model", default="deepseek")
    ap.add_argument("--out", default="out/trace_goodput.csv")
    a = ap.parse_args()
    prof = calibrated(a.model)
    res = trace_replay(prof, read_trace(a.trace, prof.nodes), POLICIES, 6 * 3600.0, 10.0, 5.0)
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    Path(a.out).write_text(goodput_csv(res))
    for pol, m in res.items():
        g = np.array([x for _, x in m.goodput])
        extra = f"  expert fraction {m.bucket_values[0]:.3g} -> {m.bucket_values[-1]:.3g}" if pol == "moc" else ""
        print(f"{pol:<10} mean goodput {g.mean():7.2f} samples/s  first bucket {g[0]:7.2f}{extra}")


if __name__ == "__main__":
    main()
