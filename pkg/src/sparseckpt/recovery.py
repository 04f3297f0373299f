"""Sparse-to-dense conversion, recovery scopes and pipeline-local replay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from .core import SnapshotMode
from .toytrain.engine import ACTIVE, DataStream, OperatorMode, ToyConfig, TrainState, execute, operator_ids, stage_op_ids
from .toytrain.logs import UpstreamLog, gc_logs
from .toytrain.serialize import CorruptRecord, from_bytes
from .toytrain.snapshot import SnapshotRecord, SparseCheckpoint, apply_record, empty_state, modes_of

__all__ = [
    "ConversionPlan",
    "ConversionStep",
    "RecoveryScope",
    "Segment",
    "conversion_plan",
    "gc_logs",
    "localized_recover",
    "recovery_scope",
    "recovery_time_bounds",
    "sparse_to_dense_convert",
]


@dataclass(frozen=True)
class ConversionStep:
    record: int  # slot index loaded at this step
    replay_iteration: int
    activated: tuple[str, ...]


@dataclass(frozen=True)
class ConversionPlan:
    window_start: int
    steps: tuple[ConversionStep, ...]


def _records(ckpt: SparseCheckpoint | Sequence) -> list[SnapshotRecord]:
    recs = ckpt.records if isinstance(ckpt, SparseCheckpoint) else list(ckpt)
    out = []
    for k, r in enumerate(recs):
        if isinstance(r, (bytes, bytearray)):
            r = from_bytes(bytes(r), slot_hint=k)
        if r is None:
            raise CorruptRecord(f"slot {k}: missing record")
        if r.slot != k:
            raise CorruptRecord(f"slot {k}: record carries slot {r.slot}")
        out.append(r)
    if not out:
        raise CorruptRecord("slot 0: missing record")
    w = out[0].window
    if len(out) != w:
        raise CorruptRecord(f"slot {len(out)}: missing record (window has {w})")
    ws = out[0].window_start
    for k, r in enumerate(out):
        if r.iteration != ws + k or r.window_start != ws:
            raise CorruptRecord(f"slot {k}: iteration {r.iteration} does not belong to window starting {ws}")
    return out


def conversion_plan(ckpt: SparseCheckpoint | Sequence) -> ConversionPlan:
    recs = _records(ckpt)
    ws = recs[0].window_start
    return ConversionPlan(ws, tuple(ConversionStep(k, ws + k + 1, tuple(r.full_ids())) for k, r in enumerate(recs)))


def _restrict(rec: SnapshotRecord, keep: set[str]) -> SnapshotRecord:
    return SnapshotRecord(rec.kind, rec.iteration, rec.window_start, rec.window, rec.slot, rec.seed, rec.cursor,
                          rec.compute_bytes, tuple(e for e in rec.entries if e.id in keep))


def _canonical(state: TrainState, ids: Sequence[str]) -> TrainState:
    missing = [i for i in ids if i not in state.ops]
    if missing:
        raise CorruptRecord(f"window does not cover operator {missing[0]}")
    state.ops = {i: state.ops[i] for i in ids}
    return state


def sparse_to_dense_convert(
    ckpt: SparseCheckpoint | Sequence,
    cfg: ToyConfig,
    data: DataStream | None = None,
    on_step: Callable[[int, dict], None] | None = None,
    log: UpstreamLog | None = None,
) -> TrainState:
    """Dense state at ``window_start + W`` rebuilt from a sparse checkpoint.

    Step k loads record k (its Full operators become Active, ComputeOnly ones
    get fresh compute weights) and replays iteration ``window_start + k + 1``.
    A one-record window is already dense and is returned as loaded, i.e. at
    ``window_start``.  ``on_step(k, modes)`` observes the mode map used by each
    replay.
    """
    recs = _records(ckpt)
    ids = operator_ids(cfg)
    data = data or DataStream(cfg)
    state = empty_state(cfg)
    if len(recs) == 1:
        return _canonical(apply_record(state, recs[0]), ids)
    for k, rec in enumerate(recs):
        state = _canonical(apply_record(state, rec), ids)
        modes = modes_of(state)
        if on_step is not None:
            on_step(k, dict(modes))
        state = execute(state, modes, data=data, log=log).state
    if not all(o.resident for o in state.ops.values()):
        raise CorruptRecord("conversion finished with frozen operators; window does not cover every operator")
    return state


# ----------------------------------------------------------------------------- scopes


@dataclass(frozen=True)
class Segment:
    first: int
    last: int

    @property
    def stages(self) -> tuple[int, ...]:
        return tuple(range(self.first, self.last + 1))

    def touches(self, stage: int) -> bool:
        return self.first - 1 <= stage <= self.last + 1


@dataclass(frozen=True)
class RecoveryScope:
    """One independently recoverable contiguous run of pipeline stages.

    ``upstream`` is the stage whose logged activations feed the segment (or
    ``"data"`` at the pipeline head); ``downstream`` the stage whose logged
    gradients flow back into it (or ``"loss"`` at the tail).  The affected
    data-parallel group is the set of stage indices, across every pipeline.
    """

    segment: Segment
    failed: frozenset = frozenset()
    upstream: int | str = "data"
    downstream: int | str = "loss"
    restarted: bool = False

    @property
    def stages(self) -> tuple[int, ...]:
        return self.segment.stages

    @property
    def dp_groups(self) -> tuple[int, ...]:
        return self.segment.stages


def _scope(first: int, last: int, pp: int, failed, restarted=False) -> RecoveryScope:
    return RecoveryScope(Segment(first, last), frozenset(failed),
                         "data" if first == 0 else first - 1,
                         "loss" if last == pp - 1 else last + 1, restarted)


def recovery_scope(failed: Iterable[tuple[int, int] | int], pp_stages: int, dp_degree: int = 1,
                   ongoing: Sequence[RecoveryScope] = ()) -> list[RecoveryScope]:
    """Scopes after adding ``failed`` workers to the ``ongoing`` recoveries.

    Workers are ``(pipeline, stage)`` pairs (a bare int means pipeline 0).
    New failures inside or next to an ongoing scope merge into it and restart
    it; the rest form maximal contiguous runs, each its own scope.
    """
    workers = []
    for w in failed:
        p, s = (0, w) if isinstance(w, int) else w
        if not (0 <= p < dp_degree and 0 <= s < pp_stages):
            raise KeyError(f"unknown worker (pipeline={p}, stage={s})")
        workers.append((p, s))
    # intervals: (first, last, failed workers, restarted)
    items = [[sc.segment.first, sc.segment.last, set(sc.failed), False] for sc in ongoing]
    n_ongoing = len(items)
    for p, s in sorted(workers, key=lambda w: (w[1], w[0])):
        hit = [it for it in items[:n_ongoing] if it[0] - 1 <= s <= it[1] + 1]
        if hit:
            it = hit[0]
            it[0], it[1] = min(it[0], s), max(it[1], s)
            it[2].add((p, s))
            it[3] = True
        else:
            items.append([s, s, {(p, s)}, False])
    # merge overlapping/adjacent intervals (adjacent failed stages form one segment)
    items.sort(key=lambda x: x[0])
    merged: list[list] = []
    for it in items:
        if merged and it[0] <= merged[-1][1] + 1:
            m = merged[-1]
            m[1] = max(m[1], it[1])
            m[2] |= it[2]
            m[3] = m[3] or it[3]
        else:
            merged.append(list(it))
    return [_scope(a, b, pp_stages, f, r) for a, b, f, r in merged]


def localized_recover(
    scope: RecoveryScope | Segment | Sequence[int],
    ckpt: SparseCheckpoint | Sequence,
    logs: UpstreamLog,
    cfg: ToyConfig,
    target_iteration: int,
    data: DataStream | None = None,
    relog: UpstreamLog | None = None,
) -> dict:
    """Stage states of the scope at ``target_iteration``, replayed from the checkpoint and boundary logs.

    Only the scope's operators are ever materialised: conversion runs on the
    records restricted to them, then the lost iterations are re-executed with
    inputs and output gradients read from ``logs``.  Boundary tensors the
    segment sends while replaying are written to ``relog`` so its neighbours'
    logs can be rebuilt.
    """
    if isinstance(scope, RecoveryScope):
        stages = list(scope.stages)
    elif isinstance(scope, Segment):
        stages = list(scope.stages)
    else:
        stages = sorted(scope)
    recs = _records(ckpt)
    keep = set(i for s in stages for i in stage_op_ids(cfg, s))
    ids = [i for i in operator_ids(cfg) if i in keep]
    data = data or DataStream(cfg)
    ws, w = recs[0].window_start, recs[0].window
    if target_iteration < ws + (w if w > 1 else 0):
        raise ValueError("target iteration precedes the end of the checkpoint window")
    state = empty_state(cfg)
    if w == 1:
        state = _canonical(apply_record(state, _restrict(recs[0], keep)), ids)
    else:
        for rec in recs:
            state = _canonical(apply_record(state, _restrict(rec, keep)), ids)
            state = execute(state, modes_of(state), stages=stages, source=logs, data=data, log=relog).state
    modes = {i: ACTIVE for i in ids}
    while state.iteration < target_iteration:
        state = execute(state, modes, stages=stages, source=logs, data=data, log=relog).state
    return {"iteration": state.iteration, "cursor": state.cursor, "ops": state.ops}


def recovery_time_bounds(policy: str, w_or_interval: float, t_iter: float) -> tuple[float, float, float]:
    """(min, max, expected) replay seconds: sparse 0 / 2WT / 1.5WT, dense 0 / IT / IT/2."""
    if w_or_interval <= 0:
        return (0.0, 0.0, 0.0)
    x = w_or_interval * t_iter
    if policy in ("sparse", "moetion"):
        return (0.0, 2.0 * x, 1.5 * x)
    if policy in ("dense", "gemini", "checkfreq"):
        return (0.0, x, 0.5 * x)
    raise ValueError(f"unknown policy {policy!r}")
