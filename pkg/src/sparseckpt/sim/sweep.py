"""Grids of simulations (model x MTBF x policy, precision plans, interval curves) and their CSV emission."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .failures import FailureTrace, Poisson
from .profiles import SimProfile
from .simulator import BUCKET_S, METRIC_COLUMNS, Metrics, SimConfig, run_simulation

MTBF_GRID = {"2H": 7200.0, "1H": 3600.0, "30M": 1800.0, "20M": 1200.0, "10M": 600.0}


@dataclass
class Row:
    model: str
    policy: str
    mtbf_s: float
    values: dict = field(default_factory=dict)
    runs: list = field(default_factory=list)  # Metrics per seed
    error: str | None = None

    def csv_row(self) -> list:
        if self.error is not None:
            return [self.model, self.policy, _fmt(self.mtbf_s)] + ["" for _ in METRIC_COLUMNS[3:]] + [self.error]
        return [_fmt(self.values[c]) if c not in ("model", "policy") else self.values[c] for c in METRIC_COLUMNS] + [""]


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)) or (isinstance(x, float) and x.is_integer() and abs(x) < 1e15):
        return str(int(x))
    if isinstance(x, float) and math.isinf(x):
        return "inf"
    return f"{x:.6g}"


def _one(args):
    cfg = args
    try:
        return run_simulation(cfg), None
    except Exception as exc:  # reported as a failed row
        return None, f"{type(exc).__name__}: {exc}"


def merge(runs: Sequence[Metrics]) -> dict:
    """Seed-averaged metrics row (label taken from the first run)."""
    rows = [m.row() for m in runs]
    out = dict(rows[0])
    for c in ("overhead_s_per_iter", "overhead_pct", "recovery_total_s", "ettr", "tokens_lost"):
        out[c] = float(np.mean([r[c] for r in rows]))
    return out


def sweep(
    profiles: Mapping[str, SimProfile] | Sequence[SimProfile],
    mtbfs: Iterable[float],
    policies: Iterable[str],
    seeds: Sequence[int] = (0,),
    horizon: float = 12 * 3600.0,
    t_restart: float = 30.0,
    detection_delay: float = 5.0,
    policy_params: Mapping[str, dict] | None = None,
    workers: int = 1,
) -> list[Row]:
    """One row per (model, policy, MTBF), averaged over ``seeds``.

    Seed ``s`` draws the same failure times for every policy of a model
    (common random numbers), so policy differences are not sampling noise.
    """
    profs = list(profiles.values()) if isinstance(profiles, Mapping) else list(profiles)
    keys, cfgs = [], []
    for prof in profs:
        for mtbf in mtbfs:
            for pol in policies:
                keys.append((prof.name, pol, float(mtbf)))
                pp = dict((policy_params or {}).get(pol, {}))
                for s in seeds:
                    cfgs.append(SimConfig(prof, pol, Poisson(float(mtbf)), horizon, t_restart, detection_delay, s, dict(pp)))
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_one, cfgs))
    else:
        results = [_one(c) for c in cfgs]
    rows, n = [], len(seeds)
    for i, (model, pol, mtbf) in enumerate(keys):
        chunk = results[i * n : (i + 1) * n]
        errs = [e for _, e in chunk if e is not None]
        if errs:
            rows.append(Row(model, pol, mtbf, error=errs[0]))
        else:
            runs = [m for m, _ in chunk]
            rows.append(Row(model, pol, mtbf, merge(runs), runs))
    return rows


def interval_sweep(profile: SimProfile, mtbfs: Sequence[float], intervals: Sequence[int], seeds: Sequence[int] = (0,),
                   horizon: float = 12 * 3600.0, t_restart: float = 0.0, detection_delay: float = 0.0,
                   policy: str = "gemini") -> np.ndarray:
    """Mean dense-policy ETTR, shape (len(mtbfs), len(intervals)) (one ETTR-vs-interval curve per MTBF)."""
    out = np.zeros((len(mtbfs), len(intervals)))
    for a, mtbf in enumerate(mtbfs):
        for b, interval in enumerate(intervals):
            e = [run_simulation(SimConfig(profile, policy, Poisson(float(mtbf)), horizon, t_restart, detection_delay,
                                          s, {"interval": int(interval)})).ettr for s in seeds]
            out[a, b] = float(np.mean(e))
    return out


def is_unimodal(y: Sequence[float], tol: float = 0.0) -> bool:
    """Non-decreasing then non-increasing (steps against the trend up to ``tol`` are tolerated)."""
    y = np.asarray(y, dtype=np.float64)
    k = int(np.argmax(y))
    return bool(np.all(np.diff(y[: k + 1]) >= -tol) and np.all(np.diff(y[k:]) <= tol))


def trace_replay(profile: SimProfile, trace: FailureTrace, policies: Iterable[str], horizon: float = 6 * 3600.0,
                 t_restart: float = 30.0, detection_delay: float = 5.0, seed: int = 0,
                 policy_params: Mapping[str, dict] | None = None, bucket_s: float = BUCKET_S) -> dict[str, Metrics]:
    return {
        pol: run_simulation(SimConfig(profile, pol, trace, horizon, t_restart, detection_delay, seed,
                                      dict((policy_params or {}).get(pol, {})), bucket_s))
        for pol in policies
    }


# ----------------------------------------------------------------------------- CSV


def metrics_csv(rows: Sequence[Row] | Sequence[Metrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(METRIC_COLUMNS) + ["error"])
    for r in rows:
        if isinstance(r, Metrics):
            r = Row(r.model, r.policy, r.mtbf_s, r.row(), [r])
        w.writerow(r.csv_row())
    return buf.getvalue()


def goodput_csv(results: Mapping[str, Metrics], moc_fraction: bool = True) -> str:
    """``policy,bucket_start_s,samples_per_s`` rows; MoC rows add the checkpointed-expert fraction."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["policy", "bucket_start_s", "samples_per_s", "expert_fraction"])
    for pol, m in results.items():
        for (t0, g), v in zip(m.goodput, m.bucket_values):
            frac = _fmt(float(v)) if (moc_fraction and m.policy == "moc") else ""
            w.writerow([pol, _fmt(float(t0)), _fmt(g), frac])
    return buf.getvalue()
