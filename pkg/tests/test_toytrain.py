import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sparseckpt.core import DEFAULT_PLAN, ModelSpec, dense_checkpoint_size
from sparseckpt.schedule import generate_schedule
from sparseckpt.sim.profiles import _sizes
from sparseckpt.toytrain import (
    ACTIVE,
    FROZEN,
    Batch,
    CorruptRecord,
    ToyConfig,
    UpstreamLog,
    execute,
    from_bytes,
    init_state,
    load_dense,
    model_spec,
    optimizer_step_adam,
    quantize,
    run,
    snapshot_cost_model,
    to_bytes,
)
from sparseckpt.toytrain.engine import set_master
from sparseckpt.toytrain.snapshot import build_sparse_checkpoint, take_dense_checkpoint, take_sparse_snapshot
from sparseckpt.verify import state_bytes, toy_schedule

FIG5 = ToyConfig(layers=1, experts=4, top_k=2)


def _half_rne(x: float) -> float:
    # struct's IEEE binary16 packing rounds half to even; an oracle independent of numpy
    return struct.unpack("<e", struct.pack("<e", x))[0]


def test_quantize_fp16_matches_reference_rounding():
    got = quantize(np.array([0.1], dtype=np.float32), 2)[0]
    assert float(got) == _half_rne(float(np.float32(0.1)))
    assert float(got) != float(np.float32(0.1))


@given(st.lists(st.floats(-6e4, 6e4, width=32), min_size=1, max_size=32))
def test_quantize_properties(xs):
    a = np.array(xs, dtype=np.float32)
    assert np.array_equal(quantize(a, 4), a)
    q = quantize(a, 2)
    assert np.array_equal(quantize(q, 2), q)  # representable values are fixed points
    assert all(float(v) == _half_rne(float(x)) for v, x in zip(q, a))


def _scalar_cfg(**kw):
    return ToyConfig(layers=1, experts=1, top_k=1, d_model=1, expert_hidden=None, with_non_expert=False,
                     residual=False, tokens=1, microbatches=1, optimizer="sgd", lr=0.1, compute_bytes=4, **kw)


def test_hand_arithmetic_sgd_step():
    s = init_state(_scalar_cfg())
    set_master(s, "L0.E0", [1.0])
    b = Batch.single([[2.0]], [[0.0]])
    r = execute(s, s.all_modes(), b)
    assert r.state.ops["L0.E0"].master[0] == np.float32(0.6)
    assert r.loss == pytest.approx(2.0)
    modes = s.all_modes()
    modes["L0.E0"] = FROZEN
    r2 = execute(s, modes, b)
    assert r2.state.ops["L0.E0"].master[0] == np.float32(1.0)
    assert r2.loss == pytest.approx(2.0)


def test_compute_weights_track_master():
    s = run(init_state(ToyConfig(seed=4)), 3)
    for o in s.ops.values():
        assert np.array_equal(o.compute, quantize(o.master, s.cfg.compute_bytes))


def test_adam_examples():
    z = np.zeros(3, dtype=np.float32)
    w, m, v, _ = optimizer_step_adam(z + 1, z, z, z, 0, 0.001)
    assert np.array_equal(w, z + 1) and not m.any() and not v.any()
    w, *_ = optimizer_step_adam(np.zeros(1, np.float32), np.zeros(1, np.float32), np.zeros(1, np.float32),
                                np.ones(1, np.float32), 0, 0.001)
    assert w[0] == pytest.approx(-0.001 / (1 + 1e-8), rel=1e-6)
    # bias correction makes a constant-gradient step exactly lr * g / (|g| + eps) whatever the step
    # count, so the two-steps-vs-doubled-lr contrast needs gradients that change between calls
    g1, g2 = np.ones(1, np.float32), np.full(1, 3.0, np.float32)
    a = optimizer_step_adam(np.zeros(1, np.float32), z[:1], z[:1], g1, 0, 0.001)
    a = optimizer_step_adam(a[0], a[1], a[2], g2, a[3], 0.001)
    b = optimizer_step_adam(np.zeros(1, np.float32), z[:1], z[:1], g1, 0, 0.002)
    assert a[0][0] != b[0][0]
    c = optimizer_step_adam(np.zeros(1, np.float32), z[:1], z[:1], g1, 0, 0.001)
    c = optimizer_step_adam(c[0], c[1], c[2], g1, c[3], 0.001)
    assert c[0][0] == pytest.approx(b[0][0], rel=1e-6)


def test_fig5_slot_layout():
    sched = toy_schedule(FIG5, 3)
    s = init_state(FIG5)
    r0 = take_sparse_snapshot(s, sched, 0)
    assert r0.full_ids() == ["L0.E0", "L0.E1"]
    assert sorted(r0.compute_only_ids()) == sorted(["L0.NE", "L0.G", "L0.E2", "L0.E3"])
    r2 = take_sparse_snapshot(s, sched, 2)
    assert sorted(r2.full_ids()) == ["L0.G", "L0.NE"] and r2.compute_only_ids() == []


def test_single_slot_window_is_dense():
    s = run(init_state(FIG5), 2)
    ids = [o for o in s.ops]
    rec = take_sparse_snapshot(s, generate_schedule(ids, 1, len(ids)), 0)
    dense = take_dense_checkpoint(s)
    assert [e.id for e in rec.entries] == [e.id for e in dense.entries]
    assert rec.payload_bytes == dense.payload_bytes


def test_dense_checkpoint_size_and_roundtrip():
    cfg = ToyConfig(seed=2)
    s = run(init_state(cfg), 4)
    rec = take_dense_checkpoint(s)
    assert rec.payload_bytes == dense_checkpoint_size(model_spec(cfg), cfg.plan).payload_bytes
    assert state_bytes(load_dense(from_bytes(to_bytes(rec)), cfg)) == state_bytes(s)


def test_snapshot_cost_model():
    assert snapshot_cost_model(32 * 2**20, 16 * 2**20) == 2.0
    assert snapshot_cost_model(0, 1e9) == 0.0


def test_fig5_snapshot_reduction():
    p = 10**6
    m = ModelSpec.build("fig5", 1, 4, 2, p, p, gate_params=p)
    sizes = _sizes(m, DEFAULT_PLAN)
    ids = [f"L0.E{j}" for j in range(4)] + ["L0.NE", "L0.G"]
    sched = generate_schedule(ids, 3, 2)
    slot0 = sched.slot_bytes(sizes)[0]
    dense = sum(s.full for s in sizes.values())
    assert (slot0, dense) == (32 * p, 72 * p)
    assert snapshot_cost_model(slot0, 1.0) / snapshot_cost_model(dense, 1.0) == pytest.approx(0.444, abs=5e-4)


def test_corrupt_record_detected():
    rec = take_dense_checkpoint(init_state(FIG5))
    buf = bytearray(to_bytes(rec))
    buf[40] ^= 1
    with pytest.raises(CorruptRecord, match="slot 3: checksum"):
        from_bytes(bytes(buf), slot_hint=3)


seeds = st.integers(0, 2**16)


@given(seeds)
def test_determinism(seed):
    cfg = ToyConfig(seed=seed, layers=2)
    assert state_bytes(run(init_state(cfg), 3)) == state_bytes(run(init_state(cfg), 3))


@given(seeds, st.sets(st.sampled_from(["L0.E0", "L0.E3", "L1.NE", "L1.G", "L2.E1"]), min_size=1))
def test_frozen_operators_are_inert(seed, frozen):
    cfg = ToyConfig(seed=seed)
    s = run(init_state(cfg), 1)
    modes = s.all_modes()
    for i in frozen:
        modes[i] = FROZEN
    out = execute(s, modes).state
    for i in frozen:
        a, b = s.ops[i], out.ops[i]
        assert a.step == b.step
        for x, y in ((a.master, b.master), (a.m, b.m), (a.v, b.v)):
            assert x.tobytes() == y.tobytes()


@given(seeds, st.sampled_from(["L0.E1", "L1.NE", "L1.G", "L2.E2"]))
def test_frozen_forward_equivalence(seed, op):
    cfg = ToyConfig(seed=seed, pp_stages=3)
    s = run(init_state(cfg), 2)
    la, lf = UpstreamLog(), UpstreamLog()
    ra = execute(s, s.all_modes(), log=la)
    modes = s.all_modes()
    modes[op] = FROZEN
    frozen = s.copy()
    st_ = frozen.ops[op]
    st_.master = st_.m = st_.v = None  # only the compute copy is left
    rf = execute(frozen, modes, log=lf)
    assert ra.loss == rf.loss
    assert la.entries.keys() == lf.entries.keys()
    assert all(la.entries[k].tobytes() == lf.entries[k].tobytes() for k in la.entries)


@given(seeds)
def test_logging_is_transparent(seed):
    cfg = ToyConfig(seed=seed, pp_stages=3)
    a = run(init_state(cfg), 2, log=UpstreamLog())
    b = run(init_state(cfg), 2)
    assert state_bytes(a) == state_bytes(b)


@given(seeds, st.integers(1, 6))
def test_window_coverage(seed, window):
    cfg = ToyConfig(seed=seed, layers=2, experts=3)
    sched = toy_schedule(cfg, window)
    states = [init_state(cfg)]
    for _ in range(sched.window):
        states.append(run(states[-1], 1))
    ck = build_sparse_checkpoint(states[: sched.window], sched)
    assert ck.coverage() == {i: 1 for i in states[0].ops}


@given(seeds)
def test_record_serialization_roundtrip(seed):
    cfg = ToyConfig(seed=seed, compute_bytes=1)
    s = run(init_state(cfg), 1)
    rec = take_sparse_snapshot(s, toy_schedule(cfg, 3), 1)
    assert to_bytes(from_bytes(to_bytes(rec))) == to_bytes(rec)


def test_active_without_master_rejected():
    s = init_state(FIG5)
    s.ops["L0.E0"].master = None
    with pytest.raises(ValueError, match="not resident"):
        execute(s, s.all_modes())
    assert ACTIVE.value == "active"
