"""Per-policy cost models used by the simulator.

Each model answers three questions for the event loop: how long the snapshot
taken during the next iteration stalls training, what happens to checkpoint
bookkeeping when an iteration completes, and what a failure costs (replay
seconds, load seconds, tokens lost).  Replication and persistence run on a
single FIFO link per policy; a checkpoint becomes usable for recovery only
once its last byte has been replicated (or persisted, for the disk baseline).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..core import OperatorDescriptor, OperatorKind, OperatorSizes
from ..schedule import MoCState, SparseSchedule
from .timing import localized_iteration_time


@dataclass
class FailureCost:
    replay_s: float
    load_s: float
    lost_iterations: int
    restore_point: int
    tokens_lost: float = 0.0
    conversion_s: float = 0.0


@dataclass
class Timing:
    t_iter: float
    t_stage: float
    microbatches: int
    pp_stages: int
    t_sync: float
    t_update: float

    def replay_iteration(self, localized: bool, segment_stages: int = 1) -> float:
        if not localized:
            return self.t_iter
        # a joint segment of L stages still needs L - 1 fill steps
        return localized_iteration_time(self.t_stage, self.microbatches + segment_stages - 1, self.t_sync,
                                        self.t_update)


class _Link:
    """FIFO transfer link; returns completion times."""

    def __init__(self, bandwidth: float):
        self.bw = bandwidth
        self.free = 0.0

    def send(self, ready: float, nbytes: float) -> float:
        start = max(ready, self.free)
        self.free = start + (nbytes / self.bw if self.bw != float("inf") else 0.0)
        return self.free

    def reset(self, t: float) -> None:
        self.free = t


def _trim(persisted: list, now: float) -> None:
    """Drop checkpoints older than the newest one already usable at ``now``."""
    k = len(persisted) - 1
    while k > 0 and persisted[k][1] > now:
        k -= 1
    if k > 0:
        del persisted[:k]


def op_compute_weights(ops: Sequence[OperatorDescriptor], popularity: np.ndarray | None, top_k: int) -> dict[str, float]:
    """Relative per-iteration compute of each operator: params x share of tokens it processes."""
    n_e = max((o.expert for o in ops if o.kind == OperatorKind.EXPERT), default=-1) + 1
    p = np.full(max(n_e, 1), 1.0 / max(n_e, 1)) if popularity is None else np.asarray(popularity, dtype=np.float64)
    return {o.id: o.param_count * (top_k * p[o.expert] if o.kind == OperatorKind.EXPERT else 1.0) for o in ops}


class PolicyModel:
    name = "policy"
    label: float | int = 0
    checkpoints = 0  # checkpoints that became usable for recovery
    localized = False

    def stall(self, state_it: int, t_start: float) -> float:
        return 0.0

    def iteration_done(self, state_it: int, t_end: float) -> None:
        pass

    def failure(self, tf: float, progress: int, localized_stages: int = 1) -> FailureCost:
        raise NotImplementedError

    def after_recovery(self, t: float, progress: int) -> None:
        pass

    @property
    def trajectory_value(self) -> float:
        return float(self.label)


class MoEtionModel(PolicyModel):
    name = "moetion"

    def __init__(self, schedule: SparseSchedule, sizes: dict[str, OperatorSizes], timing: Timing,
                 pcie_bw: float, replication_bw: float, replicas: int = 2, logging: bool = True,
                 frozen_discount: float = 1 / 3, compute_weights: dict[str, float] | None = None,
                 include_load: bool = True):
        self.schedule = schedule
        self.W = schedule.window
        self.label = self.W
        self.timing = timing
        self.pcie = pcie_bw
        self.slot_bytes = schedule.slot_bytes(sizes)
        self.slot_stall = [max(0.0, b / pcie_bw - timing.t_iter) for b in self.slot_bytes]
        self.link = _Link(replication_bw)
        self.replicas = replicas
        self.logging = logging
        self.localized = logging
        self.include_load = include_load
        self.replication_bw = replication_bw
        cw = compute_weights or {i: 1.0 for i in sizes}
        total = sum(cw.values())
        order = schedule.slots
        # share of compute belonging to operators still frozen while replaying step k
        self.frozen_share = [sum(cw[i] for s in order[k + 1 :] for i in s.active) / total for k in range(self.W)]
        self.discount = frozen_discount
        self.windows: dict[int, list[float]] = {}
        self.dead: set[int] = set()
        # (window start, persist time, sparse?); the initial state counts as a dense checkpoint
        self.persisted: list[tuple[int, float, bool]] = [(0, 0.0, False)]

    def stall(self, state_it, t_start):
        return self.slot_stall[state_it % self.W]

    def iteration_done(self, state_it, t_end):
        k = state_it % self.W
        ws = state_it - k
        if ws in self.dead:
            return
        done = self.link.send(t_end, self.replicas * self.slot_bytes[k])
        self.windows.setdefault(ws, []).append(done)
        if k == self.W - 1 and len(self.windows[ws]) == self.W:
            self.persisted.append((ws, max(self.windows.pop(ws)), True))
            self.checkpoints += 1
        _trim(self.persisted, t_end)
        if self.dead and k == 0:
            self.dead = {d for d in self.dead if d >= ws}

    def conversion_s(self, localized_stages: int = 1) -> float:
        per = self.timing.replay_iteration(self.logging, localized_stages)
        return sum(per * (1.0 - self.discount * f) for f in self.frozen_share)

    def failure(self, tf, progress, localized_stages=1):
        # windows whose records were not fully replicated die with the failed host
        self.persisted = [x for x in self.persisted if x[1] <= tf]
        for ws, dones in list(self.windows.items()):
            if any(d > tf for d in dones):
                self.dead.add(ws)
                del self.windows[ws]
        self.link.reset(tf)
        return self.cost(progress, localized_stages)

    def cost(self, progress: int, localized_stages: int = 1) -> FailureCost:
        """Recovery cost from the latest persisted checkpoint (no bookkeeping changes)."""
        ws, _, sparse = self.persisted[-1]
        per = self.timing.replay_iteration(self.logging, localized_stages)
        load = sum(self.slot_bytes) / self.replication_bw if (self.include_load and sparse) else 0.0
        if sparse and self.W > 1:
            conv = self.conversion_s(localized_stages)
            lost = progress - ws - self.W
            return FailureCost(conv + lost * per, load, lost, ws, 0.0, conv)
        lost = progress - ws
        return FailureCost(lost * per, load, lost, ws)


class DenseModel(PolicyModel):
    """Periodic dense checkpoints (in-memory replication, or persisted to storage when ``persist_bw`` is set)."""

    def __init__(self, name: str, interval: int, dense_bytes: float, timing: Timing, pcie_bw: float,
                 replication_bw: float, replicas: int = 2, persist_bw: float | None = None,
                 include_load: bool = True, snapshot_stall: float | None = None):
        self.name = name
        self.I = interval
        self.label = interval
        self.D = dense_bytes
        self.timing = timing
        self.snap_s = dense_bytes / pcie_bw
        self.base_stall = max(0.0, self.snap_s - timing.t_iter) if snapshot_stall is None else snapshot_stall
        self.to_storage = persist_bw is not None
        bw = persist_bw if persist_bw is not None else replication_bw
        self.link = _Link(bw)
        self.load_s = (dense_bytes / bw) if include_load else 0.0
        self.copies = 1 if self.to_storage else replicas
        self.persisted: list[tuple[int, float]] = [(0, 0.0)]

    def is_ckpt(self, state_it):
        return state_it > 0 and state_it % self.I == 0

    def stall(self, state_it, t_start):
        """Snapshot of state ``state_it`` copied to host memory from the start of the next iteration."""
        if not self.is_ckpt(state_it):
            return 0.0
        extra = 0.0
        if self.to_storage:
            # the two-phase pipeline cannot snapshot again before the previous persist finished
            extra = max(0.0, self.link.free - t_start)
        done = self.link.send(t_start + extra + self.snap_s, self.copies * self.D)
        if self.persisted[-1][0] == state_it:
            self.persisted[-1] = (state_it, done)  # retried after a failure
        else:
            self.persisted.append((state_it, done))
        return self.base_stall + extra

    def iteration_done(self, state_it, t_end):
        if self.is_ckpt(state_it):
            self.checkpoints += 1
        _trim(self.persisted, t_end)

    def failure(self, tf, progress, localized_stages=1):
        self.persisted = [(c, tp) for c, tp in self.persisted if tp <= tf]
        self.link.reset(tf)
        c = self.persisted[-1][0]
        lost = progress - c
        return FailureCost(lost * self.timing.t_iter, self.load_s if c > 0 else 0.0, lost, c)


class MoCModel(PolicyModel):
    """Round-robin partial expert snapshots every iteration plus all non-expert state."""

    name = "moc"

    def __init__(self, state: MoCState, ops: Sequence[OperatorDescriptor], sizes: dict[str, OperatorSizes],
                 timing: Timing, pcie_bw: float, replication_bw: float, tokens_per_iter: float, top_k: int,
                 popularity: np.ndarray | None = None, replicas: int = 2, include_load: bool = True):
        self.state = state
        self.timing = timing
        self.pcie = pcie_bw
        self.E = state.experts
        self.expert_bytes = np.zeros(self.E)
        self.base_bytes = 0.0
        for o in ops:
            if o.kind == OperatorKind.EXPERT:
                self.expert_bytes[o.expert] += sizes[o.id].full
            else:
                self.base_bytes += sizes[o.id].full
        self.link = _Link(replication_bw)
        self.replicas = replicas
        self.include_load = include_load
        self.replication_bw = replication_bw
        self.tokens = tokens_per_iter
        self.top_k = top_k
        self.p = np.full(self.E, 1.0 / self.E) if popularity is None else np.asarray(popularity, dtype=np.float64)
        self.snap = np.zeros(self.E, dtype=np.int64)  # latest persisted state index per expert
        self.pending: list[tuple[float, int, list[int]]] = []
        self.base_persisted = 0
        self.current: list[int] = []
        self.label = state.k

    def _bytes(self, experts):
        return self.base_bytes + float(self.expert_bytes[experts].sum())

    def stall(self, state_it, t_start):
        self.current = self.state.step()
        return max(0.0, self._bytes(self.current) / self.pcie - self.timing.t_iter)

    def iteration_done(self, state_it, t_end):
        done = self.link.send(t_end, self.replicas * self._bytes(self.current))
        self.pending.append((done, state_it, self.current))
        self.checkpoints += 1
        self._flush(t_end)

    def _flush(self, t):
        keep = []
        for done, s, ex in self.pending:
            if done <= t:
                self.snap[ex] = s
                self.base_persisted = s
            else:
                keep.append((done, s, ex))
        self.pending = keep

    def failure(self, tf, progress, localized_stages=1):
        self._flush(tf)
        self.pending = []
        self.link.reset(tf)
        c = self.base_persisted
        ages = np.maximum(0, c - self.snap)
        lost_tokens = float(self.tokens * self.top_k * np.dot(self.p, ages))
        trained = float(max(1, c) * self.tokens * self.top_k)
        self.state.on_failure(lost_tokens, trained)
        self.label = self.state.k
        self.snap[:] = c  # stale experts are now the live state
        lost = progress - c
        load = self._bytes(list(range(self.E))) / self.replication_bw if self.include_load else 0.0
        return FailureCost(lost * self.timing.t_iter, load, lost, c, lost_tokens)

    @property
    def trajectory_value(self):
        return self.state.k / self.E
