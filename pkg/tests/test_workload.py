import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sparseckpt.core import ModelSpec
from sparseckpt.schedule import detect_drift, order_operators
from sparseckpt.workload import (
    UNIFORM,
    DriftSpec,
    active_expert_stats,
    alpha_for_skew,
    apply_popularity,
    expected_skew,
    gen_routing_trace,
    hhi,
    per_expert_frequency,
    sample_popularity,
    skewness,
)


def test_hhi_and_skew_examples():
    u = np.full(64, 1 / 64)
    assert hhi(u) == pytest.approx(1 / 64) and skewness(u) == pytest.approx(0, abs=1e-15)
    one = np.eye(64)[3]
    assert hhi(one) == 1 and skewness(one) == pytest.approx(1)
    p = np.array([0.5, 0.5, 0, 0])
    assert hhi(p) == 0.5 and skewness(p) == pytest.approx(1 / 3)


def test_alpha_examples():
    assert alpha_for_skew(0.5, 64) == pytest.approx(0.015625, rel=1e-12)
    assert f"{alpha_for_skew(0.25, 64):.3g}" == "0.0469"
    assert alpha_for_skew(0, 64) == UNIFORM


@pytest.mark.parametrize("s", [0.25, 0.5, 0.75])
def test_monte_carlo_mean_skew(s):
    rng = np.random.default_rng([9, int(s * 100)])
    draws = sample_popularity(alpha_for_skew(s, 64), 64, rng, size=100_000)
    assert abs(float(np.mean(skewness(draws))) - s) <= 0.02


def test_concentrated_and_deterministic():
    rng = np.random.default_rng(1)
    assert skewness(sample_popularity(1e6, 64, rng)) < 0.01
    a = sample_popularity(0.1, 64, np.random.default_rng(5))
    b = sample_popularity(0.1, 64, np.random.default_rng(5))
    assert np.array_equal(a, b)


def test_nearly_all_experts_active_at_realistic_scale():
    rng = np.random.default_rng(44)
    p = sample_popularity(alpha_for_skew(0.5, 64), 64, rng)
    tr = gen_routing_trace(64, 8, p, 10, 512 * 2048, rng)
    assert active_expert_stats(tr).fraction_at_least(62) >= 0.9


def test_top_k_equals_e():
    rng = np.random.default_rng(0)
    tr = gen_routing_trace(6, 6, np.eye(6)[0], 2, 50, rng)
    assert np.all(tr.counts == 50)
    assert np.all(np.sort(tr.routes, axis=-1) == np.arange(6))


def test_drift_fires_within_three_periods():
    d = 5
    rng = np.random.default_rng(3)
    alpha = alpha_for_skew(0.5, 64)
    tr = gen_routing_trace(64, 8, sample_popularity(alpha, 64, rng), 3 * d, 4096, rng,
                           drift=DriftSpec(d, alpha))
    freqs = [per_expert_frequency(tr, slice(t, t + 1)) for t in range(3 * d)]
    assert any(detect_drift(freqs[t - 1], freqs[t]) for t in range(d, 3 * d, d))


def test_active_stats_examples():
    rng = np.random.default_rng(2)
    tr = gen_routing_trace(8, 2, np.full(8, 1 / 8), 1, 4096, rng)
    assert active_expert_stats(tr).active[0, 0] == 8


@pytest.mark.parametrize("s", [0, 0.25, 0.5, 0.75, 0.99])
def test_skew_sweep_median_active(s):
    rng = np.random.default_rng([12, int(s * 100)])
    p = np.full(64, 1 / 64) if s == 0 else sample_popularity(alpha_for_skew(s, 64), 64, rng)
    tr = gen_routing_trace(64, 8, p, 4, 2**16, rng)
    assert active_expert_stats(tr).median_active >= 0.8 * 64


def test_top_k_over_e_rejected():
    with pytest.raises(ValueError):
        gen_routing_trace(4, 5, np.full(4, 0.25), 1, 1, np.random.default_rng(0))


@given(st.integers(2, 512))
def test_uniform_and_one_hot(e):
    assert skewness(np.full(e, 1 / e)) == pytest.approx(0, abs=1e-12)
    assert skewness(np.eye(e)[e - 1]) == pytest.approx(1)


@given(st.floats(1e-6, 0.999), st.integers(2, 4096))
def test_alpha_inverse_identity(s, e):
    assert expected_skew(alpha_for_skew(s, e), e) == pytest.approx(s, abs=1e-9)


@given(st.integers(0, 2**16), st.integers(2, 16), st.integers(1, 3), st.integers(1, 300))
def test_token_conservation_and_counters(seed, e, layers, tokens):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, e + 1))
    tr = gen_routing_trace(e, k, sample_popularity(0.3, e, rng), 3, tokens, rng, layers=layers)
    assert np.all(tr.counts.sum(axis=2) == k * tokens)
    m = apply_popularity(ModelSpec.build("m", layers, e, k, 10, 10), tr)
    tot = tr.counts.sum(axis=0)
    for o in order_operators(m.operators):
        if o.expert is not None:
            assert o.popularity.hard == tot[o.layer, o.expert]
