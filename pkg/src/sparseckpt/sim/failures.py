"""Failure processes: Poisson arrivals and replayed traces (CSV ``t_seconds,node_id,kind``)."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

log = logging.getLogger(__name__)

KINDS = ("crash",)


@dataclass(frozen=True)
class FailureEvent:
    t: float
    node: int
    kind: str = "crash"


@dataclass(frozen=True)
class FailureTrace:
    events: tuple[FailureEvent, ...] = ()
    nodes: int | None = None

    def __post_init__(self):
        ts = [e.t for e in self.events]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise ValueError("trace timestamps must be non-decreasing")
        for e in self.events:
            if e.kind not in KINDS:
                raise ValueError(f"unknown failure kind {e.kind!r}")
            if e.t < 0:
                raise ValueError("negative failure time")
            if self.nodes is not None and not 0 <= e.node < self.nodes:
                raise ValueError(f"node id {e.node} outside cluster of {self.nodes} nodes")

    def __len__(self) -> int:
        return len(self.events)

    @property
    def times(self) -> np.ndarray:
        return np.array([e.t for e in self.events], dtype=np.float64)

    def mean_gap(self, horizon: float) -> float:
        return horizon / len(self.events) if self.events else float("inf")


@dataclass(frozen=True)
class Poisson:
    mtbf: float
    nodes: int = 1

    def __post_init__(self):
        if not self.mtbf > 0:
            raise ValueError("MTBF must be > 0")


def inject_failures(process, horizon: float, rng: np.random.Generator) -> FailureTrace:
    """Materialise a failure process over ``[0, horizon)``."""
    if isinstance(process, FailureTrace):
        keep = tuple(e for e in process.events if e.t < horizon)
        if len(keep) < len(process.events):
            log.warning("dropping %d trace events beyond the %.0f s horizon", len(process.events) - len(keep), horizon)
        return FailureTrace(keep, process.nodes)
    if isinstance(process, Poisson):
        # draw in blocks until the horizon is passed; inter-arrivals ~ Exp(MTBF)
        times: list[float] = []
        t = 0.0
        while True:
            gaps = rng.exponential(process.mtbf, size=max(16, int(2 * horizon / process.mtbf) + 16))
            for g in gaps:
                t += g
                if t >= horizon:
                    break
                times.append(t)
            if t >= horizon:
                break
        nodes = rng.integers(0, process.nodes, size=len(times))
        return FailureTrace(tuple(FailureEvent(float(a), int(n)) for a, n in zip(times, nodes)), process.nodes)
    if process is None:
        return FailureTrace()
    raise TypeError(f"unknown failure process {process!r}")


def read_trace(path_or_text, nodes: int | None = None) -> FailureTrace:
    text = Path(path_or_text).read_text() if not str(path_or_text).lstrip().startswith("t_seconds") else str(path_or_text)
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and set(rows[0]) != {"t_seconds", "node_id", "kind"}:
        raise ValueError("trace CSV header must be t_seconds,node_id,kind")
    ev = tuple(FailureEvent(float(r["t_seconds"]), int(r["node_id"]), r["kind"].strip()) for r in rows)
    return FailureTrace(ev, nodes)


def write_trace(trace: FailureTrace, path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t_seconds", "node_id", "kind"])
    for e in trace.events:
        w.writerow([f"{e.t:.3f}", e.node, e.kind])
    if path is not None:
        Path(path).write_text(buf.getvalue())
    return buf.getvalue()


def synth_trace(n_events: int, horizon: float, nodes: int, rng: np.random.Generator,
                burstiness: float = 0.0) -> FailureTrace:
    """Exactly ``n_events`` crashes in ``[0, horizon)``; ``burstiness`` > 0 clusters them."""
    if burstiness > 0:
        w = rng.gamma(1.0 / burstiness, size=n_events + 1)
        cuts = np.cumsum(w)[:-1] / w.sum() * horizon
    else:
        cuts = np.sort(rng.uniform(0, horizon, size=n_events))
    nodes_ = rng.integers(0, nodes, size=n_events)
    return FailureTrace(tuple(FailureEvent(round(float(t), 3), int(n)) for t, n in zip(cuts, nodes_)), nodes)


def from_events(events: Iterable[tuple[float, int]], nodes: int | None = None) -> FailureTrace:
    return FailureTrace(tuple(FailureEvent(float(t), int(n)) for t, n in events), nodes)
