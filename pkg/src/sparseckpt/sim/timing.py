"""Iteration-time, collective-time and closed-form ETTR models."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np


def nccl_time(m: float, p: int, coeffs) -> float:
    """alpha(p) + beta(p) * m.  ``coeffs`` is a ClusterSpec or a ``{p: (alpha, beta)}`` mapping."""
    table: Mapping[int, tuple[float, float]] = getattr(coeffs, "nccl", coeffs)
    if p not in table:
        raise KeyError(f"no NCCL coefficients for group size {p}")
    a, b = table[p]
    return a + b * m


def pipeline_time(stage_times: Sequence[float], microbatches: int) -> float:
    """(M + S - 1) * max_s t_s for one pipeline."""
    return (microbatches + len(stage_times) - 1) * max(stage_times)


def iteration_time(stage_times, microbatches: int, t_sync: float = 0.0, t_update: float = 0.0) -> float:
    """Slowest data-parallel pipeline plus gradient sync and optimizer update.

    ``stage_times`` is one pipeline's per-stage times or a list of them.
    """
    st = list(stage_times)
    pipes = st if st and isinstance(st[0], (list, tuple, np.ndarray)) else [st]
    return max(pipeline_time(p, microbatches) for p in pipes) + t_sync + t_update


def localized_iteration_time(t_stage: float, microbatches: int, t_sync: float = 0.0, t_update: float = 0.0) -> float:
    """One replayed iteration of a single stage fed from logs: no pipeline fill or drain."""
    return microbatches * t_stage + t_sync + t_update


def analytic_ettr(t_ckpt, interval, t_iter, expected_r, mtbf):
    """1 / (1 + T_ckpt / (T_iter * I)) * 1 / (1 + E[R] / MTBF); broadcasts over numpy inputs."""
    if np.any(np.asarray(mtbf) <= 0):
        raise ValueError("mtbf must be > 0")
    return 1.0 / (1.0 + np.asarray(t_ckpt) / (np.asarray(t_iter) * np.asarray(interval))) / (
        1.0 + np.asarray(expected_r) / np.asarray(mtbf)
    )
