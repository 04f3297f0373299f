"""Checkpoint policies: the sparse window scheduler plus the dense and round-robin baselines."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .core import OperatorDescriptor, OperatorKind, OperatorSizes, ProfiledStats, ceil_div

log = logging.getLogger(__name__)

MAX_INTERVAL = 10**6


class Ordering(str, enum.Enum):
    HARD = "hard"
    SOFT = "soft"
    DECAYED = "decayed"
    CAPACITY = "capacity"
    IDENTITY = "identity"  # keep the given order


@dataclass(frozen=True)
class Slot:
    active: tuple[str, ...]
    compute_only: tuple[str, ...]


@dataclass(frozen=True)
class SparseSchedule:
    window: int
    o_active: int
    slots: tuple[Slot, ...]
    ordering: str = Ordering.HARD.value
    created_at: int = 0

    @property
    def order(self) -> list[str]:
        return [i for s in self.slots for i in s.active]

    def slot_of(self, op_id: str) -> int:
        for k, s in enumerate(self.slots):
            if op_id in s.active:
                return k
        raise KeyError(op_id)

    def slot_bytes(self, sizes: Mapping[str, OperatorSizes]) -> list[int]:
        return [sum(sizes[i].full for i in s.active) + sum(sizes[i].compute for i in s.compute_only)
                for s in self.slots]


# ----------------------------------------------------------------------------- window planning


def find_window_size(sizes: Sequence[OperatorSizes], t_iter: float, pcie_bandwidth: float,
                     allow_single: bool = False) -> tuple[int, int]:
    """(W_sparse, O_Active) from mean per-operator sizes.

    The loop stops at O_Active == 2 without testing it (that value is the
    floor); ``allow_single`` extends the search down to one operator per slot.
    """
    if not (t_iter > 0 and pcie_bandwidth > 0):
        raise ValueError("non-positive snapshot budget")
    n = len(sizes)
    if n == 0:
        raise ValueError("no operators")
    full = sum(s.full for s in sizes) / n
    comp = sum(s.compute for s in sizes) / n
    budget = t_iter * pcie_bandwidth

    def fits(a):
        return (full * a + comp * (n - a)) / pcie_bandwidth <= t_iter

    a = n
    while a > 2:
        if fits(a):
            break
        a -= 1
    if not fits(a):
        if allow_single and a == 2 and fits(1):
            a = 1
        else:
            log.warning("snapshot of %d operators/slot exceeds the per-iteration budget (%.3g B); "
                        "checkpointing will stall", a, budget)
    return ceil_div(n, a), a


def order_operators(ops: Sequence[OperatorDescriptor], scheme: Ordering | str = Ordering.HARD,
                    alpha: float | None = None, batch_counts: Mapping[str, float] | None = None
                    ) -> list[OperatorDescriptor]:
    """Experts ascending by popularity score (ties by layer, expert), then non-expert and gate operators.

    ``TimeDecayed`` uses each descriptor's stored EMA; passing ``alpha`` and
    ``batch_counts`` applies one more EMA step before sorting.
    """
    scheme = Ordering(scheme)
    experts = [o for o in ops if o.kind == OperatorKind.EXPERT]
    others = [o for o in ops if o.kind != OperatorKind.EXPERT]
    if scheme == Ordering.IDENTITY:
        return list(ops)

    def score(o: OperatorDescriptor) -> float:
        p = o.popularity
        if scheme == Ordering.HARD:
            return p.hard
        if scheme == Ordering.SOFT:
            return p.soft
        if scheme == Ordering.DECAYED:
            if alpha is not None and batch_counts is not None:
                return ema_update(p.ema, batch_counts.get(o.id, 0.0), alpha)
            return p.ema
        if o.capacity is None:
            raise ValueError(f"capacity-aware ordering needs a capacity for {o.id}")
        return p.hard / o.capacity

    experts.sort(key=lambda o: (score(o), o.layer, o.expert))
    kind_rank = {OperatorKind.NON_EXPERT: 0, OperatorKind.GATE: 1}
    others.sort(key=lambda o: (o.layer, kind_rank[o.kind], o.id))
    return experts + others


def ema_update(prev: float, batch_count: float, alpha: float) -> float:
    return alpha * prev + (1.0 - alpha) * batch_count


def generate_schedule(ordered: Sequence[str], window: int, o_active: int,
                      ordering: str = Ordering.HARD.value, created_at: int = 0) -> SparseSchedule:
    ordered = tuple(ordered)
    n = len(ordered)
    if n == 0:
        raise ValueError("empty operator list")
    if o_active < 1 or ceil_div(n, o_active) != window:
        raise ValueError(f"W={window} inconsistent with {n} operators at {o_active} per slot")
    slots = []
    for i in range(window):
        end = min(n, (i + 1) * o_active)
        slots.append(Slot(ordered[i * o_active : end], ordered[end:]))
    return SparseSchedule(window, o_active, tuple(slots), str(getattr(ordering, "value", ordering)), created_at)


def _slot_bytes_fast(ordered_sizes: Sequence[OperatorSizes], window: int, a: int) -> np.ndarray:
    full = np.array([s.full for s in ordered_sizes], dtype=np.int64)
    comp = np.array([s.compute for s in ordered_sizes], dtype=np.int64)
    n = len(full)
    cf = np.concatenate([[0], np.cumsum(full)])
    cc = np.concatenate([[0], np.cumsum(comp)])
    starts = np.arange(window) * a
    ends = np.minimum(starts + a, n)
    return (cf[ends] - cf[starts]) + (cc[n] - cc[ends])


def plan_schedule(ops: Sequence[OperatorDescriptor], sizes: Mapping[str, OperatorSizes], t_iter: float,
                  pcie_bandwidth: float, ordering: Ordering | str = Ordering.HARD, created_at: int = 0,
                  allow_single: bool = False) -> SparseSchedule:
    """Window planning end to end: window size on mean sizes, popularity order, then the exact-fit pass.

    The exact-fit pass grows W (one operator fewer per slot at a time) until
    every slot's real byte count fits the per-iteration budget or O_Active
    reaches the floor.
    """
    ordered = order_operators(ops, ordering)
    ids = [o.id for o in ordered]
    osz = [sizes[i] for i in ids]
    w, a = find_window_size(osz, t_iter, pcie_bandwidth, allow_single)
    floor = 1 if allow_single else min(2, len(ids))
    budget = t_iter * pcie_bandwidth
    while a > floor and _slot_bytes_fast(osz, w, a).max() > budget:
        # smallest W increase that actually changes the per-slot count
        a -= 1
        w = ceil_div(len(ids), a)
    return generate_schedule(ids, w, a, Ordering(ordering).value, created_at)


def schedule_from_profile(ops: Sequence[OperatorDescriptor], profile: ProfiledStats, pcie_bandwidth: float,
                          ordering: Ordering | str = Ordering.HARD, **kw) -> SparseSchedule:
    sizes = {o.id: profile.op_sizes[o.id] for o in ops}
    return plan_schedule(ops, sizes, profile.iteration_time, pcie_bandwidth, ordering, **kw)


# ----------------------------------------------------------------------------- drift


def detect_drift(old: Sequence[float], new: Sequence[float], change: float = 0.10,
                 fraction: float = 0.25) -> bool:
    """True iff at least ``fraction`` of experts changed activation frequency by more than ``change``."""
    old = np.asarray(old, dtype=np.float64)
    new = np.asarray(new, dtype=np.float64)
    if old.shape != new.shape:
        raise ValueError("popularity vectors must cover the same experts")
    if old.size == 0:
        return False
    diff = np.abs(new - old)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(old > 0, diff / np.where(old > 0, old, 1.0), np.where(diff > 0, np.inf, 0.0))
    changed = int(np.count_nonzero(rel > change))
    f = Fraction(fraction).limit_denominator(10**6)
    return changed * f.denominator >= f.numerator * old.size


@dataclass
class DriftRescheduler:
    """Recomputes the schedule when popularity drifts; the swap happens only at a window boundary."""

    schedule: SparseSchedule
    baseline: np.ndarray
    pending: SparseSchedule | None = None
    reschedules: int = 0

    def observe(self, popularity: Sequence[float], build) -> bool:
        """``build()`` returns the replacement schedule if drift fired."""
        if detect_drift(self.baseline, popularity):
            self.pending = build()
            self.baseline = np.asarray(popularity, dtype=np.float64).copy()
            return True
        return False

    def at_window_boundary(self) -> SparseSchedule:
        if self.pending is not None:
            self.schedule, self.pending = self.pending, None
            self.reschedules += 1
        return self.schedule


# ----------------------------------------------------------------------------- baselines


def checkfreq_interval(persist_s: float, t_iter: float, overhead_cap: float = 0.03) -> int:
    """Smallest interval whose amortised persist time stays under ``overhead_cap`` of an iteration."""
    if not 0 < overhead_cap <= 1:
        raise ValueError("overhead_cap must be in (0, 1]")
    if persist_s <= 0:
        return 1
    limit = overhead_cap * t_iter
    i = max(1, math.ceil(persist_s / limit))
    while i > 1 and persist_s / (i - 1) <= limit:
        i -= 1
    while persist_s / i > limit:
        i += 1
    if i > MAX_INTERVAL:
        raise ValueError(f"no interval <= {MAX_INTERVAL} meets the {overhead_cap:.2%} overhead cap")
    return i


def oracle_interval(t_ckpt: float, t_iter: float, mtbf: float, i_max: int = 20000,
                    extra_recovery: float = 0.0) -> int:
    """ETTR-maximising dense interval, E[R] = I*T_iter/2 (+ ``extra_recovery``); ties go to the smaller I."""
    from .sim.timing import analytic_ettr

    if mtbf <= 0:
        raise ValueError("mtbf must be > 0")
    if t_ckpt <= 0:
        return 1
    i = np.arange(1, i_max + 1, dtype=np.float64)
    f = analytic_ettr(t_ckpt, i, t_iter, 0.5 * i * t_iter + extra_recovery, mtbf)
    return int(np.argmax(f)) + 1


@dataclass
class MoCState:
    """Round-robin partial expert checkpointing with failure-driven escalation of K."""

    experts: int
    k: int
    cursor: int = 0
    budget_frac: float = 0.01
    tokens_lost: float = 0.0
    escalations: list = field(default_factory=list)

    def __post_init__(self):
        if not 1 <= self.k <= self.experts:
            raise ValueError("K must be in [1, E]")

    @classmethod
    def initial(cls, experts: int, fraction: float = 0.125, budget_frac: float = 0.01) -> "MoCState":
        return cls(experts, max(1, int(round(experts * fraction))), 0, budget_frac)

    @property
    def fraction(self) -> float:
        return self.k / self.experts

    def step(self) -> list[int]:
        """Expert indices snapshotted this iteration (non-expert and gate state is always included)."""
        out = [(self.cursor + i) % self.experts for i in range(self.k)]
        self.cursor = (self.cursor + self.k) % self.experts
        return out

    def on_failure(self, tokens_lost: float, tokens_trained: float) -> bool:
        """Record a failure's token loss; double K when the cumulative loss exceeds the budget."""
        self.tokens_lost += tokens_lost
        if self.tokens_lost > self.budget_frac * tokens_trained and self.k < self.experts:
            self.k = min(self.experts, 2 * self.k)
            self.escalations.append(self.k)
            return True
        return False


def moc_step(state: MoCState) -> list[int]:
    return state.step()


def moc_on_failure(state: MoCState, tokens_lost: float, tokens_trained: float) -> MoCState:
    state.on_failure(tokens_lost, tokens_trained)
    return state


@dataclass
class MoEtionPolicy:
    schedule: SparseSchedule
    name: str = "moetion"


@dataclass
class CheckFreqPolicy:
    interval: int
    overhead_cap: float = 0.03
    name: str = "checkfreq"


@dataclass
class GeminiPolicy:
    interval: int
    name: str = "gemini"


@dataclass
class MoCPolicy:
    state: MoCState
    name: str = "moc"
