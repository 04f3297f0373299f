import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparseckpt.config import bundled
from sparseckpt.core import PRECISION_PLANS
from sparseckpt.schedule import generate_schedule
from sparseckpt.sim import (
    POLICIES,
    FailureTrace,
    Poisson,
    SimConfig,
    analytic_ettr,
    calibrated,
    from_events,
    inject_failures,
    iteration_time,
    nccl_time,
    read_trace,
    run_simulation,
    synthetic,
    write_trace,
)
from sparseckpt.sim.sweep import is_unimodal, metrics_csv, sweep


# --------------------------------------------------------------------------- timing


def test_nccl_affine():
    coeffs = {4: (1e-4, 1e-8)}
    assert nccl_time(1e6, 4, coeffs) == pytest.approx(0.0101, abs=1e-12)
    assert nccl_time(0, 4, coeffs) == 1e-4
    beta1 = nccl_time(2e6, 4, coeffs) - 1e-4
    beta0 = nccl_time(1e6, 4, coeffs) - 1e-4
    assert beta1 == pytest.approx(2 * beta0, rel=1e-12)
    with pytest.raises(KeyError):
        nccl_time(1.0, 8, coeffs)


def test_iteration_time_examples():
    assert iteration_time([0.010] * 4, 8, 0.005, 0.002) == pytest.approx(0.117)
    assert iteration_time([0.3], 1, 0.05, 0.01) == pytest.approx(0.36)
    two = iteration_time([[0.010, 0.010], [0.012, 0.008]], 4, 0.0, 0.0)
    assert two == pytest.approx(5 * 0.012)


def test_analytic_ettr_examples():
    assert analytic_ettr(0.0, 1, 3.0, 0.0, 600.0) == 1.0
    # 0.06 s per iteration at T=3 s is 2% overhead; 27 s / 600 s recovery
    assert analytic_ettr(0.06, 1, 3.0, 27.0, 600.0) == pytest.approx(1 / 1.02 / 1.045, abs=1e-12)
    assert round(float(analytic_ettr(0.06, 1, 3.0, 27.0, 600.0)), 3) == 0.938
    assert round(float(analytic_ettr(0.11, 1, 1.0, 53.5, 600.0)), 3) == 0.827
    with pytest.raises(ValueError):
        analytic_ettr(0.0, 1, 1.0, 0.0, 0.0)


# --------------------------------------------------------------------------- failures


def test_poisson_counts_over_seeds():
    counts = [len(inject_failures(Poisson(600.0), 6 * 3600.0, np.random.default_rng(s))) for s in range(1000)]
    assert abs(np.mean(counts) - 36.0) <= 3 * 6 / math.sqrt(1000)


def test_poisson_victims_within_cluster():
    tr = inject_failures(Poisson(60.0, nodes=5), 3600.0, np.random.default_rng(1))
    nodes = {e.node for e in tr.events}
    assert nodes <= set(range(5)) and len(nodes) == 5
    assert np.all(np.diff(tr.times) >= 0)


def test_bundled_trace():
    tr = read_trace(bundled("trace_24_events_6h.csv"))
    assert len(inject_failures(tr, 6 * 3600.0, np.random.default_rng(0))) == 24
    # 24 events in 6 h is a 15 min mean gap; the quoted "~19 min" does not follow from those two numbers
    assert tr.mean_gap(6 * 3600.0) == 900.0


def test_empty_trace_and_truncation(caplog):
    assert len(inject_failures(FailureTrace(), 100.0, np.random.default_rng(0))) == 0
    tr = from_events([(10.0, 0), (200.0, 1)])
    assert len(inject_failures(tr, 100.0, np.random.default_rng(0))) == 1
    assert "dropping 1" in caplog.text


def test_trace_validation_and_roundtrip():
    with pytest.raises(ValueError):
        from_events([(5.0, 0), (1.0, 0)])
    with pytest.raises(ValueError):
        from_events([(1.0, 7)], nodes=4)
    tr = from_events([(1.5, 0), (2.25, 3)], nodes=4)
    assert read_trace(write_trace(tr), nodes=4) == tr


# --------------------------------------------------------------------------- run_simulation


def test_failure_free_zero_cost_is_one():
    m = run_simulation(SimConfig(synthetic(), "moetion", None, 100.0, 0.0, 0.0))
    assert m.ettr == 1.0 and m.stall_s == 0.0 and m.recovery_s == 0.0


def test_invalid_config():
    with pytest.raises(ValueError):
        SimConfig(synthetic(), horizon=0.0)
    with pytest.raises(ValueError):
        Poisson(0.0)


@settings(max_examples=25)
@given(policy=st.sampled_from(POLICIES), mtbf=st.floats(5.0, 500.0), horizon=st.floats(50.0, 2000.0),
       seed=st.integers(0, 2**16), pp=st.integers(1, 3), restart=st.floats(0.0, 20.0))
def test_accounting_identity(policy, mtbf, horizon, seed, pp, restart):
    p = synthetic(t_iter=1.0, pp=pp, microbatches=4, layers=pp, pcie_bw=4e3, replication_bw=8e3, persist_bw=2e3)
    m = run_simulation(SimConfig(p, policy, Poisson(mtbf), horizon, restart, 1.0, seed))
    assert abs(m.identity_gap()) < 1e-6 * horizon
    assert 0.0 <= m.ettr <= 1.0
    assert m.iterations * p.t_iter == pytest.approx(m.useful_s)


def _window_schedule(p, W):
    ids = [o.id for o in p.worker.operators]
    return generate_schedule(ids, W, math.ceil(len(ids) / W))


def test_moetion_events_within_bound():
    p = synthetic(t_iter=1.0, layers=2, experts=4)
    W = 4
    m = run_simulation(SimConfig(p, "moetion", Poisson(30.0), 3e4, 0.0, 0.0, seed=2,
                                 policy_params=dict(schedule=_window_schedule(p, W), frozen_discount=0.0,
                                                    include_load=False)))
    own = np.array([e.own_s for e in m.events])
    assert len(own) > 500
    assert own.max() <= 2 * W * p.t_iter + 1e-9


def test_moetion_no_stall_when_window_fits():
    p = calibrated("deepseek")
    m = run_simulation(SimConfig(p, "moetion", None, 3600.0, 0.0, 0.0))
    assert m.label == 6 and m.stall_s == 0.0


def test_logging_off_never_faster():
    p = synthetic(t_iter=1.0, pp=3, microbatches=8, layers=3, experts=4)
    tr = inject_failures(Poisson(200.0, p.nodes), 4e4, np.random.default_rng(5))
    on = run_simulation(SimConfig(p, "moetion", tr, 4e4, 0.0, 0.0, policy_params=dict(logging=True)))
    off = run_simulation(SimConfig(p, "moetion", tr, 4e4, 0.0, 0.0, policy_params=dict(logging=False)))
    assert len(on.events) == len(off.events) > 0
    for a, b in zip(on.events, off.events):
        assert a.t == b.t
    assert np.mean([e.own_s for e in off.events]) >= np.mean([e.own_s for e in on.events])


def test_moc_loses_tokens_and_escalates():
    p = calibrated("deepseek")
    m = run_simulation(SimConfig(p, "moc", Poisson(600.0), 6 * 3600.0, 10.0, 5.0, seed=1))
    assert m.tokens_lost > 0
    assert m.trajectory[-1][1] > m.trajectory[0][1]


def test_deepseek_moetion_matches_table_row():
    p = calibrated("deepseek")
    e = [run_simulation(SimConfig(p, "moetion", Poisson(600.0), 12 * 3600.0, 10.0, 5.0, seed=s)).ettr
         for s in range(4)]
    assert abs(np.mean(e) - 0.951) <= 0.03


def test_gemini_recovery_total_2h():
    # Known miss: the simulated total is ~1280 s (20 seeds). The published figure rests on restart and
    # load constants that were never reported (analysis in the decisions ledger).
    p = calibrated("deepseek")
    rec = [run_simulation(SimConfig(p, "gemini", Poisson(7200.0), 12 * 3600.0, 10.0, 5.0, seed=s)).recovery_s
           for s in range(20)]
    assert np.mean(rec) == pytest.approx(800.0, rel=0.2)


def test_determinism():
    p = calibrated("gpt")
    a = run_simulation(SimConfig(p, "gemini", Poisson(900.0), 7200.0, seed=3))
    b = run_simulation(SimConfig(p, "gemini", Poisson(900.0), 7200.0, seed=3))
    assert a.row() == b.row() and a.goodput == b.goodput


# --------------------------------------------------------------------------- sweep


def test_sweep_single_cell_equals_run():
    p = calibrated("qwen")
    rows = sweep([p], [1800.0], ["moetion"], seeds=(0,), horizon=7200.0)
    m = run_simulation(SimConfig(p, "moetion", Poisson(1800.0), 7200.0, 30.0, 5.0, 0))
    assert len(rows) == 1 and rows[0].values == m.row()
    assert metrics_csv(rows) == metrics_csv([m])


def test_sweep_grid_and_error_rows():
    p = synthetic(pcie_bw=1e4, replication_bw=1e5, persist_bw=1e4)
    rows = sweep([p], [600.0, 300.0], ["moetion", "gemini", "bogus"], horizon=600.0)
    assert [(r.policy, r.mtbf_s) for r in rows] == [(a, m) for m in (600.0, 300.0) for a in ("moetion", "gemini", "bogus")]
    assert all(r.error is None for r in rows if r.policy != "bogus")
    assert all("bogus" in r.error for r in rows if r.policy == "bogus")


def test_precision_plans_shrink_window():
    ordered = ["fp16/fp32/fp32+fp32", "fp8/fp32/fp32+fp32", "fp8/fp16/fp32+fp32", "fp16/fp16/fp16+fp16",
               "fp8/fp16/fp8+fp16", "fp8/fp8/fp8+fp16"]
    full = [PRECISION_PLANS[k].full_bytes for k in ordered]
    assert full == sorted(full, reverse=True)
    ws = [calibrated("deepseek", PRECISION_PLANS[k]).schedule().window for k in ordered]
    assert ws[0] == 6
    assert all(b <= a for a, b in zip(ws, ws[1:]))
    assert ws[-1] <= 3


def test_is_unimodal():
    assert is_unimodal([1, 2, 3, 2, 1])
    assert is_unimodal([3, 2, 1])
    assert not is_unimodal([1, 3, 2, 3])
