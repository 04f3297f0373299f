"""Skew-controlled expert popularity and synthetic routing traces."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import ModelSpec, OperatorKind, Popularity

UNIFORM = math.inf  # alpha_for_skew(0, E): the symmetric Dirichlet degenerates to the uniform vector
DEFAULT_FLOOR = 1e-3


@dataclass(frozen=True)
class PopularityVector:
    p: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        if p.ndim != 1 or p.size < 1:
            raise ValueError("popularity must be a 1-D vector")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ValueError("popularity must be non-negative and sum to 1")
        object.__setattr__(self, "p", p)

    @property
    def E(self) -> int:
        return int(self.p.size)


def hhi(p) -> float:
    p = np.asarray(getattr(p, "p", p), dtype=np.float64)
    return float(np.dot(p, p))


def skewness(p) -> float:
    """Normalised HHI: 0 for uniform shares, 1 for a single expert taking everything."""
    p = np.asarray(getattr(p, "p", p), dtype=np.float64)
    e = p.shape[-1]
    if e < 2:
        raise ValueError("skewness needs E >= 2")
    h = np.einsum("...i,...i->...", p, p)
    s = (h - 1.0 / e) / (1.0 - 1.0 / e)
    return float(s) if np.ndim(s) == 0 else s


def expected_hhi(alpha: float, e: int) -> float:
    if math.isinf(alpha):
        return 1.0 / e
    return (alpha + 1.0) / (alpha * e + 1.0)


def expected_skew(alpha: float, e: int) -> float:
    return (expected_hhi(alpha, e) - 1.0 / e) / (1.0 - 1.0 / e)


def alpha_for_skew(s_target: float, e: int) -> float:
    """Symmetric Dirichlet concentration whose expected skewness is ``s_target``."""
    if e < 2:
        raise ValueError("E must be >= 2")
    if not 0 <= s_target < 1:
        raise ValueError("target skewness must be in [0, 1)")
    if s_target == 0:
        return UNIFORM
    h = s_target * (1.0 - 1.0 / e) + 1.0 / e
    return (1.0 - h) / (h * e - 1.0)


def sample_popularity(alpha: float, e: int, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Symmetric Dirichlet(alpha) draw(s), computed in log space.

    Gamma(alpha) = Gamma(alpha + 1) * U**(1/alpha), so the log of each gamma
    variate is finite even when alpha is tiny enough that the variate itself
    underflows to zero (which makes ``Generator.dirichlet`` return NaNs).
    """
    shape = (e,) if size is None else (size, e)
    if math.isinf(alpha):
        return np.full(shape, 1.0 / e)
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    logg = np.log(rng.standard_gamma(alpha + 1.0, size=shape)) + np.log(rng.random(shape)) / alpha
    logg -= logg.max(axis=-1, keepdims=True)
    w = np.exp(logg)
    return w / w.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class DriftSpec:
    """Every ``every`` iterations draw a new popularity vector (``resample``) or blend toward it (``interpolate``)."""

    every: int
    alpha: float
    mode: str = "resample"

    def __post_init__(self):
        if self.every < 1:
            raise ValueError("drift period must be >= 1")
        if self.mode not in ("resample", "interpolate"):
            raise ValueError(f"unknown drift mode {self.mode!r}")


@dataclass
class RoutingTrace:
    counts: np.ndarray  # (iterations, layers, E) tokens routed per expert
    soft: np.ndarray  # (iterations, layers, E) summed gating weight
    popularity: np.ndarray  # (iterations, E) the p used at each iteration
    top_k: int
    tokens_per_iter: int
    routes: np.ndarray | None = None  # (iterations, layers, tokens, top_k) expert ids
    weights: np.ndarray | None = None  # matching gating weights

    @property
    def iterations(self) -> int:
        return self.counts.shape[0]

    @property
    def E(self) -> int:
        return self.counts.shape[2]


def _route_chunk(logq: np.ndarray, q: np.ndarray, n: int, k: int, rng: np.random.Generator):
    e = logq.size
    if k == e:
        sel = np.broadcast_to(np.arange(e), (n, e))
    else:
        # Gumbel-top-k: the k largest perturbed log-weights are a draw of k
        # distinct experts by sequential renormalisation
        keys = logq[None, :] - np.log(-np.log(rng.random((n, e))))
        sel = np.argpartition(-keys, k - 1, axis=1)[:, :k]
    w = q[sel]
    return sel, w / w.sum(axis=1, keepdims=True)


def gen_routing_trace(
    e: int,
    top_k: int,
    p,
    iterations: int,
    tokens_per_iter: int,
    rng: np.random.Generator,
    layers: int = 1,
    drift: DriftSpec | None = None,
    floor: float = DEFAULT_FLOOR,
    keep_routes: bool | None = None,
    chunk: int = 1 << 15,
) -> RoutingTrace:
    """Route ``tokens_per_iter`` tokens per layer per iteration to ``top_k`` distinct experts.

    Routing probabilities are ``(1 - floor) * p + floor / E``: raw Dirichlet
    shares at high skew are so small that most experts would never be
    selected, while real gates keep some mass on every expert.
    """
    if top_k > e:
        raise ValueError("top_k must be <= E")
    if tokens_per_iter < 1:
        raise ValueError("tokens_per_iter must be >= 1")
    p = np.asarray(getattr(p, "p", p), dtype=np.float64)
    if keep_routes is None:
        keep_routes = tokens_per_iter * iterations * layers <= 1 << 16
    counts = np.zeros((iterations, layers, e), dtype=np.int64)
    soft = np.zeros((iterations, layers, e), dtype=np.float64)
    pops = np.zeros((iterations, e))
    routes = np.zeros((iterations, layers, tokens_per_iter, top_k), dtype=np.int32) if keep_routes else None
    weights = np.zeros((iterations, layers, tokens_per_iter, top_k)) if keep_routes else None
    cur, nxt = p.copy(), None
    for t in range(iterations):
        if drift is not None:
            phase = t % drift.every
            if phase == 0 and t > 0:
                if drift.mode == "resample":
                    cur = sample_popularity(drift.alpha, e, rng)
                else:
                    cur = nxt if nxt is not None else cur
            if drift.mode == "interpolate":
                if phase == 0:
                    nxt = sample_popularity(drift.alpha, e, rng)
                    base = cur
                lam = phase / drift.every
                cur_t = (1 - lam) * base + lam * nxt
            else:
                cur_t = cur
        else:
            cur_t = cur
        pops[t] = cur_t
        q = (1.0 - floor) * cur_t + floor / e
        logq = np.log(q)
        for l in range(layers):
            done = 0
            while done < tokens_per_iter:
                n = min(chunk, tokens_per_iter - done)
                sel, w = _route_chunk(logq, q, n, top_k, rng)
                counts[t, l] += np.bincount(sel.reshape(-1), minlength=e)
                soft[t, l] += np.bincount(sel.reshape(-1), weights=w.reshape(-1), minlength=e)
                if keep_routes:
                    routes[t, l, done : done + n] = sel
                    weights[t, l, done : done + n] = w
                done += n
    return RoutingTrace(counts, soft, pops, top_k, tokens_per_iter, routes, weights)


@dataclass(frozen=True)
class ActiveStats:
    active: np.ndarray  # (iterations, layers) number of experts with >= 1 token
    shares: np.ndarray  # (E,) token share over the whole trace, all layers

    def fraction_at_least(self, n: int) -> float:
        return float(np.mean(self.active >= n))

    @property
    def median_active(self) -> float:
        return float(np.median(self.active))

    def cdf(self) -> tuple[np.ndarray, np.ndarray]:
        x = np.sort(self.active.reshape(-1))
        return x, np.arange(1, x.size + 1) / x.size


def active_expert_stats(trace: RoutingTrace) -> ActiveStats:
    if trace.iterations == 0:
        raise ValueError("empty trace")
    active = np.count_nonzero(trace.counts > 0, axis=2)
    tot = trace.counts.sum(axis=(0, 1)).astype(np.float64)
    return ActiveStats(active, tot / tot.sum())


def apply_popularity(model: ModelSpec, trace: RoutingTrace, iterations: slice = slice(None)) -> ModelSpec:
    """Model whose expert descriptors carry the trace's hard and soft counts (layers map one to one)."""
    c = trace.counts[iterations].sum(axis=0)
    s = trace.soft[iterations].sum(axis=0)
    ops = []
    for o in model.operators:
        if o.kind == OperatorKind.EXPERT:
            l = o.layer % c.shape[0]
            pop = o.popularity.observe(float(c[l, o.expert]), float(s[l, o.expert]))
            o = o.with_popularity(pop)
        ops.append(o)
    return model.with_operators(ops)


def per_expert_frequency(trace: RoutingTrace, iterations: slice, layer: int = 0) -> np.ndarray:
    c = trace.counts[iterations, layer].sum(axis=0).astype(np.float64)
    return c / max(1.0, c.sum())


def popularity_csv_rows(trace: RoutingTrace) -> list[tuple]:
    tot = trace.counts.sum(axis=(0, 1))
    share = tot / tot.sum()
    rows = [(j, int(tot[j]), float(share[j])) for j in range(trace.E)]
    return rows


def summary(p: Sequence[float]) -> dict:
    return {"hhi": hhi(p), "skewness": skewness(p)}
