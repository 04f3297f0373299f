"""Equivalence checks on the toy engine: converted vs oracle checkpoints, localized recovery, MoC token loss."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .recovery import localized_recover, recovery_scope, sparse_to_dense_convert
from .schedule import MoCState, SparseSchedule, generate_schedule, order_operators
from .toytrain.engine import (
    DataStream,
    OpState,
    ToyConfig,
    TrainState,
    execute,
    init_state,
    operator_descriptors,
    operator_ids,
    stage_op_ids,
)
from .toytrain.logs import UpstreamLog
from .toytrain.serialize import CorruptRecord, to_bytes
from .toytrain.snapshot import build_sparse_checkpoint, load_dense, take_dense_checkpoint

VERIFY_POLICIES = ("moetion", "dense", "moc")


@dataclass(frozen=True)
class CaseResult:
    seed: int
    position: int  # window start / checkpoint iteration
    policy: str
    status: str  # pass | fail | lossy
    detail: str = ""
    tokens_lost: int = 0

    @property
    def ok(self) -> bool:
        return self.status != "fail"


def toy_schedule(cfg: ToyConfig, window: int = 3) -> SparseSchedule:
    ops = operator_descriptors(cfg)
    ordered = [o.id for o in order_operators(ops)]
    a = math.ceil(len(ordered) / window)
    # a window that does not divide the operator count rounds to the nearest feasible one
    return generate_schedule(ordered, math.ceil(len(ordered) / a), a)


def state_bytes(state: TrainState) -> bytes:
    return to_bytes(take_dense_checkpoint(state))


def op_digest(ops: dict[str, OpState], ids: Iterable[str]) -> str:
    h = hashlib.blake2b(digest_size=16)
    for i in ids:
        o = ops[i]
        h.update(i.encode())
        for a in (o.compute, o.master, o.m, o.v):
            h.update(b"-" if a is None else np.ascontiguousarray(a).tobytes())
        h.update(int(o.step).to_bytes(8, "little"))
    return h.hexdigest()


def _trajectory(cfg: ToyConfig, iterations: int, log: UpstreamLog | None = None, counts: list | None = None):
    s = init_state(cfg)
    data = DataStream(cfg)
    states = [s]
    for _ in range(iterations):
        res = execute(s, s.all_modes(), data=data, log=log)
        s = res.state
        states.append(s)
        if counts is not None:
            counts.append(res.expert_tokens.copy())
    return states


def _corrupt(rec):
    """Flip a mantissa bit of the first Full entry's first master value.

    Bit 16 rather than bit 0: a one-ulp error can be rounded away by the next
    optimizer step and would go unnoticed.
    """
    ents = list(rec.entries)
    for n, e in enumerate(ents):
        if e.master is not None:
            m = e.master.copy()
            m.view(np.uint32)[0] ^= 1 << 16
            ents[n] = replace(e, master=m)
            break
    return replace(rec, entries=tuple(ents))


def verify_moetion(cfg: ToyConfig, positions: Sequence[int], window: int = 3, corrupt: bool = False,
                   states: list | None = None) -> list[CaseResult]:
    """Sparse checkpoint at each window start, converted, vs the oracle dense checkpoint at ws + W."""
    sched = toy_schedule(cfg, window)
    states = states or _trajectory(cfg, max(positions) + sched.window)
    out = []
    for ws in positions:
        ck = build_sparse_checkpoint(states[ws : ws + sched.window], sched)
        recs = [to_bytes(r) for r in ck.records]
        if corrupt:
            # a silently damaged payload: the record still parses, only its values are off
            recs = list(ck.records)
            recs[min(1, len(recs) - 1)] = _corrupt(recs[min(1, len(recs) - 1)])
        try:
            got = sparse_to_dense_convert(recs, cfg)
        except CorruptRecord as exc:
            out.append(CaseResult(cfg.seed, ws, "moetion", "fail", str(exc)))
            continue
        target = ws + (sched.window if sched.window > 1 else 0)
        a, b = state_bytes(got), state_bytes(states[target])
        if a == b:
            out.append(CaseResult(cfg.seed, ws, "moetion", "pass"))
        else:
            diff = sum(x != y for x, y in zip(a, b)) + abs(len(a) - len(b))
            out.append(CaseResult(cfg.seed, ws, "moetion", "fail", f"{diff} bytes differ at iteration {target}"))
    return out


def verify_dense(cfg: ToyConfig, positions: Sequence[int], replay: int = 3, states: list | None = None) -> list[CaseResult]:
    """Dense checkpoint at each position, reloaded and replayed ``replay`` iterations."""
    states = states or _trajectory(cfg, max(positions) + replay)
    data = DataStream(cfg)
    out = []
    for c in positions:
        s = load_dense(take_dense_checkpoint(states[c]), cfg)
        for _ in range(replay):
            s = execute(s, s.all_modes(), data=data).state
        ok = state_bytes(s) == state_bytes(states[c + replay])
        out.append(CaseResult(cfg.seed, c, "dense", "pass" if ok else "fail",
                              "" if ok else f"replay from {c} diverged"))
    return out


def verify_moc(cfg: ToyConfig, positions: Sequence[int], fraction: float = 0.25, counts: list | None = None,
               states: list | None = None) -> list[CaseResult]:
    """MoC restore at each position: stale experts come back old, their routed tokens are lost.

    Round robin snapshots K experts (all layers) plus every non-expert and
    gate operator per iteration; the snapshot taken in iteration i+1 holds
    state i.  Restoring at ``c`` brings expert j back from its last snapshot
    s_j and loses the tokens routed to it during iterations s_j..c-1.
    """
    if states is None or counts is None:
        counts = []
        states = _trajectory(cfg, max(positions), counts=counts)
    mstate = MoCState.initial(cfg.experts, fraction)
    last = np.zeros(cfg.experts, dtype=np.int64)  # the initial state counts as a full checkpoint
    snap_at: list[np.ndarray] = []  # last[] after the snapshot of state i
    for i in range(max(positions) + 1):
        for j in mstate.step():
            last[j] = i
        snap_at.append(last.copy())
    ids = operator_ids(cfg)
    out = []
    for c in positions:
        src = snap_at[c]
        ops = {}
        for i in ids:
            st = states[c]
            if ".E" in i:
                st = states[int(src[int(i.split(".E")[1])])]
            ops[i] = st.ops[i]
        restored = TrainState(cfg, ops, c, states[c].cursor)
        lost = 0
        for j in range(cfg.experts):
            for it in range(int(src[j]), c):
                lost += int(counts[it][:, j].sum())
        same = op_digest(restored.ops, ids) == op_digest(states[c].ops, ids)
        if lost > 0 and same:
            out.append(CaseResult(cfg.seed, c, "moc", "fail", "tokens lost but state unchanged", lost))
        else:
            out.append(CaseResult(cfg.seed, c, "moc", "pass" if same else "lossy", "", lost))
    return out


def train_verify(seeds: Iterable[int] = range(20), positions: Sequence[int] = (0, 3, 6, 9, 12, 15),
                 policies: Sequence[str] = VERIFY_POLICIES, window: int = 3, corrupt: bool = False,
                 base: ToyConfig | None = None) -> list[CaseResult]:
    """seeds x positions x policies matrix; ``corrupt`` damages one MoEtion record per case."""
    base = base or ToyConfig()
    unknown = [p for p in policies if p not in VERIFY_POLICIES]
    if unknown:
        raise ValueError(f"unknown verify policy {unknown[0]!r}")
    rows = []
    for seed in seeds:
        cfg = replace(base, seed=int(seed))
        counts: list = []
        states = _trajectory(cfg, max(positions) + window, counts=counts)
        if "moetion" in policies:
            rows += verify_moetion(cfg, positions, window, corrupt, states)
        if "dense" in policies:
            rows += verify_dense(cfg, positions, window, states)
        if "moc" in policies:
            rows += verify_moc(cfg, positions, counts=counts, states=states)
    return rows


@dataclass(frozen=True)
class StageResult:
    stage: int
    recovered_ok: bool
    others_unchanged: bool
    digests_before: tuple
    digests_after: tuple


def verify_localized(cfg: ToyConfig | None = None, window_start: int = 9, target: int = 15,
                     window: int = 3) -> list[StageResult]:
    """Fail each stage in turn, recover it from the sparse checkpoint plus surviving logs."""
    cfg = cfg or ToyConfig(pp_stages=3, replicas=2)
    log = UpstreamLog()
    states = _trajectory(cfg, target, log=log)
    sched = toy_schedule(cfg, window)
    ck = build_sparse_checkpoint(states[window_start : window_start + sched.window], sched)
    oracle = states[target]
    stage_ids = [stage_op_ids(cfg, s) for s in range(cfg.pp_stages)]
    out = []
    for failed in range(cfg.pp_stages):
        live = {i: o.copy() for i, o in oracle.ops.items()}
        before = tuple(op_digest(live, ids) for ids in stage_ids)
        # the failed worker's host memory, and the logs it held, are gone
        for i in stage_ids[failed]:
            del live[i]
        sc = recovery_scope([(0, failed)], cfg.pp_stages, cfg.replicas)[0]
        rec = localized_recover(sc, ck, log.drop_owner(failed), cfg, target)
        live.update(rec["ops"])
        after = tuple(op_digest(live, ids) for ids in stage_ids)
        others = set(rec["ops"]) == set(stage_ids[failed]) and all(
            after[s] == before[s] for s in range(cfg.pp_stages) if s != failed)
        out.append(StageResult(failed, after[failed] == op_digest(oracle.ops, stage_ids[failed])
                               and rec["iteration"] == target, others, before, after))
    return out
