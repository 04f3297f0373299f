import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparseckpt.recovery import (
    CorruptRecord,
    conversion_plan,
    gc_logs,
    localized_recover,
    recovery_scope,
    recovery_time_bounds,
    sparse_to_dense_convert,
)
from sparseckpt.sim.timing import iteration_time, localized_iteration_time
from sparseckpt.toytrain import ACTIVE, ToyConfig, UpstreamLog, to_bytes
from sparseckpt.toytrain.engine import stage_op_ids
from sparseckpt.toytrain.snapshot import build_sparse_checkpoint, take_dense_checkpoint
from sparseckpt.verify import _trajectory, op_digest, state_bytes, toy_schedule, verify_localized

FIG6 = ToyConfig(layers=1, experts=4, top_k=2, seed=6)


def test_fig6_conversion_matches_dense_oracle():
    states = _trajectory(FIG6, 13)
    sched = toy_schedule(FIG6, 3)
    ck = build_sparse_checkpoint(states[10:13], sched)
    got = sparse_to_dense_convert([to_bytes(r) for r in ck.records], FIG6)
    assert got.iteration == 13
    assert to_bytes(take_dense_checkpoint(got)) == to_bytes(take_dense_checkpoint(states[13]))


def test_single_record_window_returns_it():
    states = _trajectory(FIG6, 4)
    ids = list(states[4].ops)
    from sparseckpt.schedule import generate_schedule

    ck = build_sparse_checkpoint(states[4:5], generate_schedule(ids, 1, len(ids)))
    assert state_bytes(sparse_to_dense_convert(ck, FIG6)) == state_bytes(states[4])


def test_corrupt_slot_named():
    states = _trajectory(FIG6, 3)
    recs = [bytearray(to_bytes(r)) for r in build_sparse_checkpoint(states[0:3], toy_schedule(FIG6, 3)).records]
    recs[2][60] ^= 0x10
    with pytest.raises(CorruptRecord, match="slot 2"):
        sparse_to_dense_convert([bytes(r) for r in recs], FIG6)


def test_missing_slot_rejected():
    states = _trajectory(FIG6, 3)
    ck = build_sparse_checkpoint(states[0:3], toy_schedule(FIG6, 3))
    with pytest.raises(CorruptRecord, match="missing"):
        sparse_to_dense_convert(ck.records[:2], FIG6)


def test_scope_examples():
    (sc,) = recovery_scope([1], 3)
    assert sc.stages == (1,) and sc.upstream == 0 and sc.downstream == 2
    (sc,) = recovery_scope([1, 2], 3)
    assert sc.stages == (1, 2) and sc.downstream == "loss"
    a, b = recovery_scope([0, 2], 3)
    assert a.stages == (0,) and b.stages == (2,) and a.upstream == "data"


def test_cascade_merges_into_ongoing_scope():
    first = recovery_scope([1], 4)
    merged = recovery_scope([2], 4, ongoing=first)
    assert len(merged) == 1 and merged[0].stages == (1, 2) and merged[0].restarted
    apart = recovery_scope([3], 5, ongoing=first)
    assert [s.stages for s in apart] == [(1,), (3,)] and not apart[0].restarted


def test_localized_stage_1_matches_oracle():
    (res,) = [r for r in verify_localized(window_start=9, target=15) if r.stage == 1]
    assert res.recovered_ok and res.others_unchanged


def test_full_scope_is_global_conversion():
    cfg = ToyConfig(pp_stages=3, seed=3)
    log = UpstreamLog()
    states = _trajectory(cfg, 12, log=log)
    ck = build_sparse_checkpoint(states[6:9], toy_schedule(cfg, 3))
    rec = localized_recover([0, 1, 2], ck, UpstreamLog(), cfg, 12)
    assert rec["iteration"] == 12
    assert op_digest(rec["ops"], list(states[12].ops)) == op_digest(states[12].ops, list(states[12].ops))


def test_localized_replay_speedup_formula():
    m, s, t = 8, 3, 0.01
    glob = iteration_time([t] * s, m)
    loc = localized_iteration_time(t, m)
    assert 1 - loc / glob == pytest.approx(0.23, abs=0.05)


def test_gc_logs():
    log = UpstreamLog()
    for it in range(1, 7):
        log.record(it, 0, 0, 0, "fwd", [float(it)], owner=0)
    assert len(gc_logs(log, 100)) == 0
    kept = gc_logs(log, 4)
    assert len(kept) == 3 and kept.iterations() == {4, 5, 6}


def test_gc_then_recover():
    cfg = ToyConfig(pp_stages=3, seed=5)
    log = UpstreamLog()
    states = _trajectory(cfg, 14, log=log)
    ck = build_sparse_checkpoint(states[8:11], toy_schedule(cfg, 3))
    pruned = gc_logs(log, 8)
    assert min(pruned.iterations()) == 8 and len(pruned) < len(log)
    rec = localized_recover([1], ck, pruned.drop_owner(1), cfg, 14)
    ids = stage_op_ids(cfg, 1)
    assert op_digest(rec["ops"], ids) == op_digest(states[14].ops, ids)


def test_recovery_time_bounds():
    assert recovery_time_bounds("moetion", 6, 3.0) == (0.0, 36.0, 27.0)
    assert recovery_time_bounds("dense", 31, 3.45)[2] == pytest.approx(53.475)
    assert recovery_time_bounds("moetion", 0, 3.0) == (0.0, 0.0, 0.0)


@settings(max_examples=8)
@given(st.integers(0, 2**16), st.integers(0, 8))
def test_conversion_equivalence_and_monotone_activation(seed, ws):
    cfg = ToyConfig(seed=seed)
    sched = toy_schedule(cfg, 3)
    states = _trajectory(cfg, ws + sched.window)
    ck = build_sparse_checkpoint(states[ws : ws + sched.window], sched)
    seen = []
    got = sparse_to_dense_convert(ck, cfg, on_step=lambda k, m: seen.append({i for i, v in m.items() if v == ACTIVE}))
    assert state_bytes(got) == state_bytes(states[ws + sched.window])
    assert all(a <= b for a, b in zip(seen, seen[1:]))
    assert conversion_plan(ck).steps[-1].replay_iteration == ws + sched.window
