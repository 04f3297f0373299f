"""Sparse snapshot records, sparse checkpoints and dense checkpoints of a TrainState."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ..core import METADATA_BYTES, SnapshotMode
from .engine import ACTIVE, FROZEN, OpState, OperatorMode, TrainState, operator_ids
from .numerics import quantize

DENSE = "dense"
SPARSE = "sparse"


@dataclass(frozen=True)
class Entry:
    id: str
    mode: SnapshotMode
    step: int = 0
    master: np.ndarray | None = None
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    compute: np.ndarray | None = None

    def payload_bytes(self, compute_bytes: int) -> int:
        if self.mode == SnapshotMode.FULL:
            return self.master.nbytes + self.m.nbytes + self.v.nbytes
        return self.compute.size * compute_bytes


@dataclass(frozen=True)
class SnapshotRecord:
    """One snapshot: Full entries for the slot's active set, ComputeOnly for later slots.

    A dense checkpoint is the same container with ``kind == "dense"`` and a Full
    entry for every operator.
    """

    kind: str
    iteration: int
    window_start: int
    window: int
    slot: int
    seed: int
    cursor: int
    compute_bytes: int
    entries: tuple[Entry, ...]

    @property
    def payload_bytes(self) -> int:
        return sum(e.payload_bytes(self.compute_bytes) for e in self.entries)

    @property
    def total_bytes(self) -> int:
        return self.payload_bytes + METADATA_BYTES

    def full_ids(self) -> list[str]:
        return [e.id for e in self.entries if e.mode == SnapshotMode.FULL]

    def compute_only_ids(self) -> list[str]:
        return [e.id for e in self.entries if e.mode == SnapshotMode.COMPUTE_ONLY]


def _full(state: TrainState, op_id: str) -> Entry:
    st = state.ops[op_id]
    if not st.resident:
        raise ValueError(f"operator {op_id} has no resident master state to snapshot")
    return Entry(op_id, SnapshotMode.FULL, st.step, st.master.copy(), st.m.copy(), st.v.copy())


def _compute(state: TrainState, op_id: str) -> Entry:
    st = state.ops[op_id]
    return Entry(op_id, SnapshotMode.COMPUTE_ONLY, st.step, compute=st.compute.copy())


def take_sparse_snapshot(state: TrainState, schedule, slot: int, window_start: int | None = None,
                         modes=None) -> SnapshotRecord:
    """Record for ``schedule.slots[slot]`` taken from ``state``."""
    s = schedule.slots[slot]
    known = set(state.ops)
    for i in list(s.active) + list(s.compute_only):
        if i not in known:
            raise KeyError(f"slot {slot} references unknown operator {i}")
    if modes is not None:
        frozen = [i for i in s.active if OperatorMode(modes[i]) != ACTIVE]
        if frozen:
            raise ValueError(f"slot {slot} active set contains frozen operator {frozen[0]}")
    order = {i: n for n, i in enumerate(state.ops)}
    ents = [_full(state, i) for i in s.active] + [_compute(state, i) for i in s.compute_only]
    ents.sort(key=lambda e: order[e.id])
    ws = state.iteration - slot if window_start is None else window_start
    return SnapshotRecord(SPARSE, state.iteration, ws, schedule.window, slot, state.seed, state.cursor,
                          state.cfg.compute_bytes, tuple(ents))


def take_dense_checkpoint(state: TrainState, modes=None) -> SnapshotRecord:
    if modes is not None:
        frozen = [i for i, m in modes.items() if OperatorMode(m) == FROZEN]
        if frozen:
            raise ValueError(f"dense checkpoint requires all operators Active; {frozen[0]} is Frozen")
    ents = tuple(_full(state, i) for i in state.ops)
    return SnapshotRecord(DENSE, state.iteration, state.iteration, 1, 0, state.seed, state.cursor,
                          state.cfg.compute_bytes, ents)


def apply_record(state: TrainState, record: SnapshotRecord) -> TrainState:
    """Load a record into ``state``: Full entries become resident, ComputeOnly refresh compute weights."""
    out = state.copy()
    cb = state.cfg.compute_bytes
    for e in record.entries:
        if e.mode == SnapshotMode.FULL:
            out.ops[e.id] = OpState(quantize(e.master, cb), e.master.copy(), e.m.copy(), e.v.copy(), e.step)
        else:
            cur = out.ops.get(e.id)
            if cur is not None and cur.resident:
                continue
            out.ops[e.id] = OpState(e.compute.copy(), None, None, None, e.step)
    out.iteration = record.iteration
    out.cursor = record.cursor
    return out


def empty_state(cfg) -> TrainState:
    """Placeholder state holding nothing: every operator must be filled from records."""
    return TrainState(cfg, {}, 0, 0)


def load_dense(record: SnapshotRecord, cfg) -> TrainState:
    if record.kind != DENSE and record.window != 1:
        raise ValueError("not a dense checkpoint")
    ids = operator_ids(cfg)
    have = set(record.full_ids())
    if set(ids) != have:
        raise ValueError("dense checkpoint does not cover every operator")
    st = apply_record(empty_state(cfg), record)
    st.ops = {i: st.ops[i] for i in ids}
    return st


def modes_of(state: TrainState) -> dict[str, OperatorMode]:
    return {i: ACTIVE if o.resident else FROZEN for i, o in state.ops.items()}


@dataclass
class SparseCheckpoint:
    """W_sparse consecutive records whose Full entries jointly cover every operator once."""

    window_start: int
    window: int
    records: list[SnapshotRecord] = field(default_factory=list)
    replicas: list[int] = field(default_factory=list)
    target_replicas: int = 2

    def add(self, record: SnapshotRecord) -> None:
        if record.slot != len(self.records):
            raise ValueError(f"expected slot {len(self.records)}, got {record.slot}")
        self.records.append(record)
        self.replicas.append(0)

    def replicate(self, slot: int, peers: int = 1) -> None:
        self.replicas[slot] += peers

    @property
    def complete(self) -> bool:
        return len(self.records) == self.window

    @property
    def persisted(self) -> bool:
        return self.complete and all(c >= self.target_replicas for c in self.replicas)

    def coverage(self) -> dict[str, int]:
        cnt: dict[str, int] = {}
        for r in self.records:
            for i in r.full_ids():
                cnt[i] = cnt.get(i, 0) + 1
        return cnt

    @property
    def payload_bytes(self) -> int:
        return sum(r.payload_bytes for r in self.records)


def build_sparse_checkpoint(states: Sequence[TrainState], schedule, target_replicas: int = 2) -> SparseCheckpoint:
    """Window from consecutive states ``states[k]`` (iteration window_start + k)."""
    ws = states[0].iteration
    ck = SparseCheckpoint(ws, schedule.window, target_replicas=target_replicas)
    for k, st in enumerate(states[: schedule.window]):
        ck.add(take_sparse_snapshot(st, schedule, k, window_start=ws))
    return ck


def snapshot_cost_model(record_or_bytes, pcie_bandwidth) -> float:
    """GPU-to-host copy time in seconds.  ``pcie_bandwidth`` may be a ClusterSpec."""
    nbytes = record_or_bytes if isinstance(record_or_bytes, (int, float, np.integer)) else record_or_bytes.payload_bytes
    bw = getattr(pcie_bandwidth, "pcie_bandwidth", pcie_bandwidth)
    if bw <= 0:
        raise ValueError("bandwidth must be > 0")
    return float(nbytes) / float(bw)


def record_ids(records: Iterable[SnapshotRecord]) -> list[list[str]]:
    return [r.full_ids() for r in records]
