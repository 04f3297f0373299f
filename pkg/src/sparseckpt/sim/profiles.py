"""Calibrated workload profiles and policy-model construction.

Each profile describes one worker, the heaviest pipeline stage: ceil(L/PP)
layers, each with every expert, the non-expert block and the gate.  Expert
parallelism spreads those bytes over the stage's GPUs but does not change
the per-stage total, so it is ignored for byte counts.

Calibration inputs per model are the iteration time (the measured
checkpoint overhead in seconds divided by the same overhead as a percentage), the target W_sparse and the CheckFreq
interval.  Per-layer parameter counts solve ``L*(NE + E*e) = total`` and
``L*(NE + k*e) = active`` from the published model sizes (shared experts fold into NE).  The
PCIe bandwidth is then the geometric midpoint of the range for which
plan_schedule yields the target window, and CheckFreq's persist bandwidth the
one whose 3% cap reproduces the target interval.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Any, Mapping

import numpy as np

from ..core import (
    DEFAULT_PLAN,
    ConfigError,
    ModelSpec,
    OperatorSizes,
    PrecisionPlan,
    ceil_div,
)
from ..schedule import MoCState, Ordering, SparseSchedule, checkfreq_interval, oracle_interval, plan_schedule
from .policies import DenseModel, MoCModel, MoEtionModel, PolicyModel, Timing, op_compute_weights

MOC_BUDGET = 0.001  # calibrated lost-token budget, fraction of tokens trained so far
MOC_FRACTION = 0.125
PIPELINE_SHARE = 0.92  # fraction of T_iter spent in the pipelined forward/backward
SYNC_SHARE = 0.05
UPDATE_SHARE = 0.03
CHECKFREQ_CAP = 0.03


@dataclass(frozen=True)
class ModelShape:
    key: str
    label: str
    layers: int
    experts: int
    top_k: int
    shared: int
    total_params: float
    active_params: float
    pp: int
    dp: int
    ep: int
    t_iter: float
    target_w: int
    checkfreq_interval: int
    d_model: int = 2048
    global_batch: int = 512
    microbatch_size: int = 32
    seq_len: int = 2048

    def per_layer_params(self) -> tuple[int, int]:
        """(non-expert, one expert) parameters per layer."""
        e = (self.total_params - self.active_params) / (self.layers * (self.experts - self.top_k))
        ne = self.active_params / self.layers - self.top_k * e
        return int(round(ne)), int(round(e))


SHAPES: dict[str, ModelShape] = {
    # t_iter = measured overhead seconds / overhead percent; W and CheckFreq interval are measured values too
    "llava": ModelShape("llava", "MoE-LLaVa", 32, 4, 2, 0, 2.9e9, 2.0e9, 6, 2, 8, 2.07, 3, 57),
    "gpt": ModelShape("gpt", "GPT-MoE", 12, 32, 6, 0, 7.3e9, 1.6e9, 3, 4, 8, 3.0, 3, 78),
    "qwen": ModelShape("qwen", "QWen-MoE", 24, 64, 8, 0, 14.3e9, 2.7e9, 6, 2, 8, 1.92, 5, 113),
    "deepseek": ModelShape("deepseek", "DeepSeek-MoE", 28, 64, 8, 2, 16.4e9, 3.7e9, 12, 1, 8, 3.45, 6, 124),
}


@dataclass(frozen=True)
class SimProfile:
    name: str
    worker: ModelSpec
    pp: int
    dp: int
    microbatches: int
    t_stage: float
    t_sync: float
    t_update: float
    pcie_bw: float
    replication_bw: float
    persist_bw: float
    plan: PrecisionPlan = DEFAULT_PLAN
    ep: int = 1
    samples_per_iter: float = 512.0
    tokens_per_iter: float = 512.0 * 2048
    popularity: tuple | None = None
    replicas: int = 2
    ordering: str = Ordering.HARD.value
    frozen_discount: float = 1.0 / 3.0

    def __post_init__(self):
        v = []
        for k in ("pcie_bw", "replication_bw", "persist_bw"):
            if not getattr(self, k) > 0:
                v.append(f"profile.{k} must be > 0")
        if self.pp < 1 or self.dp < 1 or self.microbatches < 1:
            v.append("profile.pp, profile.dp and profile.microbatches must be >= 1")
        if v:
            raise ConfigError(v)

    @property
    def t_iter(self) -> float:
        return (self.microbatches + self.pp - 1) * self.t_stage + self.t_sync + self.t_update

    @property
    def nodes(self) -> int:
        return self.pp * self.dp

    @property
    def top_k(self) -> int:
        return self.worker.top_k

    @property
    def experts(self) -> int:
        return self.worker.experts_per_layer

    def timing(self) -> Timing:
        return Timing(self.t_iter, self.t_stage, self.microbatches, self.pp, self.t_sync, self.t_update)

    def sizes(self) -> dict[str, OperatorSizes]:
        return _sizes(self.worker, self.plan)

    @property
    def dense_bytes(self) -> int:
        return sum(s.full for s in self.sizes().values())

    def schedule(self, pcie_bw: float | None = None) -> SparseSchedule:
        return plan_schedule(self.worker.operators, self.sizes(), self.t_iter, pcie_bw or self.pcie_bw, self.ordering)

    def replace(self, **kw) -> "SimProfile":
        return dataclasses.replace(self, **kw)

    def with_plan(self, plan: PrecisionPlan) -> "SimProfile":
        return self.replace(plan=plan)

    def with_popularity(self, p) -> "SimProfile":
        """Profile whose expert hard counts follow ``p`` (same vector for every layer)."""
        from ..core import OperatorKind

        p = np.asarray(p, dtype=np.float64)
        ops = []
        for o in self.worker.operators:
            if o.kind == OperatorKind.EXPERT:
                o = o.with_popularity(dataclasses.replace(o.popularity, hard=float(p[o.expert]) * self.tokens_per_iter))
            ops.append(o)
        return self.replace(worker=self.worker.with_operators(ops), popularity=tuple(float(x) for x in p))

    def to_dict(self) -> dict:
        w = self.worker
        ne = next(o.param_count for o in w.operators if o.id == "L0.NE")
        ex = next(o.param_count for o in w.operators if o.id == "L0.E0")
        gt = next(o.param_count for o in w.operators if o.id == "L0.G")
        d = {
            "name": self.name,
            "worker": {"layers": w.layers, "experts": w.experts_per_layer, "top_k": w.top_k,
                       "shared_experts": w.shared_experts, "non_expert_params": ne, "expert_params": ex,
                       "gate_params": gt},
            "plan": self.plan.to_dict(),
        }
        for f in dataclasses.fields(self):
            if f.name not in ("name", "worker", "plan"):
                v = getattr(self, f.name)
                d[f.name] = list(v) if isinstance(v, tuple) else v
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SimProfile":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError([f"profile: unknown key {k!r}" for k in unknown])
        w = d.pop("worker")
        if isinstance(w, Mapping):
            wk = {"layers", "experts", "top_k", "shared_experts", "non_expert_params", "expert_params", "gate_params"}
            bad = sorted(set(w) - wk)
            if bad:
                raise ConfigError([f"profile.worker: unknown key {k!r}" for k in bad])
            w = ModelSpec.build(d.get("name", "profile"), int(w["layers"]), int(w["experts"]), int(w["top_k"]),
                                int(w["expert_params"]), int(w["non_expert_params"]), int(w.get("gate_params", 1)),
                                shared_experts=int(w.get("shared_experts", 0)))
        if "plan" in d and isinstance(d["plan"], Mapping):
            d["plan"] = PrecisionPlan.from_dict(d["plan"])
        if d.get("popularity") is not None:
            d["popularity"] = tuple(float(x) for x in d["popularity"])
        return cls(worker=w, **d)


def _sizes(worker: ModelSpec, plan: PrecisionPlan) -> dict[str, OperatorSizes]:
    return {o.id: OperatorSizes(o.param_count * plan.compute_bytes, o.param_count * plan.master_bytes,
                                o.param_count * plan.optimizer_bytes) for o in worker.operators}


def worker_model(shape: ModelShape) -> ModelSpec:
    ne, e = shape.per_layer_params()
    layers = ceil_div(shape.layers, shape.pp)
    return ModelSpec.build(shape.key, layers, shape.experts, shape.top_k, e, ne, gate_params=shape.d_model * shape.experts,
                           shared_experts=shape.shared, d_model=shape.d_model)


def window_for(worker: ModelSpec, plan: PrecisionPlan, t_iter: float, bw: float, ordering=Ordering.HARD) -> int:
    return plan_schedule(worker.operators, _sizes(worker, plan), t_iter, bw, ordering).window


def calibrate_pcie(worker: ModelSpec, plan: PrecisionPlan, t_iter: float, target_w: int, iters: int = 60) -> float:
    """Geometric midpoint of the PCIe bandwidths for which plan_schedule returns ``target_w``."""
    sizes = _sizes(worker, plan)
    dense = sum(s.full for s in sizes.values())

    sched_log = logging.getLogger("sparseckpt.schedule")

    def w(bw):
        # probing far below the feasible range trips the floor warning on purpose
        prev = sched_log.disabled
        sched_log.disabled = True
        try:
            return window_for(worker, plan, t_iter, bw)
        finally:
            sched_log.disabled = prev

    def edge(pred):
        # smallest bandwidth (log-space bisection) with pred(W(bw)) true; W is non-increasing in bw
        lo, hi = dense / t_iter * 1e-4, dense / t_iter * 1.01
        for _ in range(iters):
            mid = math.sqrt(lo * hi)
            if pred(w(mid)):
                hi = mid
            else:
                lo = mid
        return hi

    lo = edge(lambda x: x <= target_w)
    hi = edge(lambda x: x < target_w)
    if w(lo) != target_w:
        raise ValueError(f"no PCIe bandwidth yields W={target_w}")
    return math.sqrt(lo * hi)


def dense_snapshot_s(profile: SimProfile) -> float:
    return profile.dense_bytes / profile.pcie_bw


def calibrated(key: str, plan: PrecisionPlan = DEFAULT_PLAN, replication_factor: float = 8.0) -> SimProfile:
    """Calibrated profile for one of the four evaluation models (``SHAPES`` keys)."""
    if key not in SHAPES:
        raise ConfigError([f"profile: unknown model {key!r} (choose from {', '.join(SHAPES)})"])
    return _calibrated(key, plan, replication_factor)


@lru_cache(maxsize=32)
def _calibrated(key: str, plan: PrecisionPlan, replication_factor: float) -> SimProfile:
    s = SHAPES[key]
    worker = worker_model(s)
    m = s.global_batch // (s.dp * s.microbatch_size)
    t_stage = PIPELINE_SHARE * s.t_iter / (m + s.pp - 1)
    # calibration always uses the default plan so that other precision plans change W
    pcie = calibrate_pcie(worker, DEFAULT_PLAN, s.t_iter, s.target_w)
    dense = sum(x.full for x in _sizes(worker, plan).values())
    dense_default = sum(x.full for x in _sizes(worker, DEFAULT_PLAN).values())
    persist_s = (s.checkfreq_interval - 0.5) * CHECKFREQ_CAP * s.t_iter
    return SimProfile(
        name=s.key, worker=worker, pp=s.pp, dp=s.dp, ep=s.ep, microbatches=m, t_stage=t_stage,
        t_sync=SYNC_SHARE * s.t_iter, t_update=UPDATE_SHARE * s.t_iter, pcie_bw=pcie,
        replication_bw=replication_factor * pcie, persist_bw=dense_default / persist_s, plan=plan,
        samples_per_iter=float(s.global_batch), tokens_per_iter=float(s.global_batch * s.seq_len),
    )


def all_calibrated(plan: PrecisionPlan = DEFAULT_PLAN) -> dict[str, SimProfile]:
    return {k: calibrated(k, plan) for k in SHAPES}


def synthetic(t_iter: float = 1.0, pp: int = 1, dp: int = 1, microbatches: int = 1, layers: int = 2, experts: int = 4,
              top_k: int = 2, expert_params: int = 1000, non_expert_params: int = 1000, pcie_bw: float = math.inf,
              replication_bw: float = math.inf, persist_bw: float = math.inf, t_sync: float = 0.0,
              t_update: float = 0.0, **kw) -> SimProfile:
    """Small hand-built profile; ``t_iter`` is split evenly over the pipeline's M + S - 1 steps."""
    worker = ModelSpec.build("synthetic", layers, experts, top_k, expert_params, non_expert_params, gate_params=10)
    t_stage = (t_iter - t_sync - t_update) / (microbatches + pp - 1)
    return SimProfile(name=kw.pop("name", "synthetic"), worker=worker, pp=pp, dp=dp, microbatches=microbatches,
                      t_stage=t_stage, t_sync=t_sync, t_update=t_update, pcie_bw=pcie_bw,
                      replication_bw=replication_bw, persist_bw=persist_bw, **kw)


POLICIES = ("moetion", "gemini", "checkfreq", "moc")


def _dense_stall(profile: SimProfile) -> float:
    return max(0.0, dense_snapshot_s(profile) - profile.t_iter)


def gemini_interval(profile: SimProfile, mtbf: float, t_restart: float = 0.0) -> int:
    """Offline oracle: ETTR-maximising interval for this MTBF (load and restart added to E[R])."""
    if math.isinf(mtbf):
        return 10**6
    load = profile.dense_bytes / profile.replication_bw
    return oracle_interval(_dense_stall(profile), profile.t_iter, mtbf, extra_recovery=t_restart + load)


def build_policy(profile: SimProfile, policy: str, mtbf: float = math.inf, t_restart: float = 0.0,
                 **params) -> PolicyModel:
    """Policy model for ``profile``.

    ``params``: ``interval`` (dense policies), ``logging`` / ``schedule`` /
    ``frozen_discount`` (MoEtion), ``budget_frac`` / ``fraction`` (MoC),
    ``replicas`` and ``include_load`` (all).
    """
    timing = profile.timing()
    sizes = profile.sizes()
    replicas = params.pop("replicas", profile.replicas)
    include_load = params.pop("include_load", True)
    pop = None if profile.popularity is None else np.asarray(profile.popularity)
    if policy == "moetion":
        sched = params.pop("schedule", None) or profile.schedule()
        cw = op_compute_weights(profile.worker.operators, pop, profile.top_k)
        model = MoEtionModel(sched, sizes, timing, profile.pcie_bw, profile.replication_bw, replicas,
                             params.pop("logging", True), params.pop("frozen_discount", profile.frozen_discount),
                             cw, include_load)
    elif policy == "gemini":
        interval = params.pop("interval", None) or gemini_interval(profile, mtbf, t_restart)
        model = DenseModel("gemini", interval, profile.dense_bytes, timing, profile.pcie_bw, profile.replication_bw,
                           replicas, include_load=include_load)
    elif policy == "checkfreq":
        cap = params.pop("overhead_cap", CHECKFREQ_CAP)
        persist_s = profile.dense_bytes / profile.persist_bw
        interval = params.pop("interval", None) or checkfreq_interval(persist_s, profile.t_iter, cap)
        model = DenseModel("checkfreq", interval, profile.dense_bytes, timing, profile.pcie_bw,
                           profile.replication_bw, replicas, persist_bw=profile.persist_bw, include_load=include_load)
    elif policy == "moc":
        state = MoCState.initial(profile.experts, params.pop("fraction", MOC_FRACTION),
                                 params.pop("budget_frac", MOC_BUDGET))
        model = MoCModel(state, profile.worker.operators, sizes, timing, profile.pcie_bw, profile.replication_bw,
                         profile.tokens_per_iter, profile.top_k, pop, replicas, include_load)
    else:
        raise ConfigError([f"policy: unknown policy {policy!r} (choose from {', '.join(POLICIES)})"])
    if params:
        raise ConfigError([f"policy.{k}: not a parameter of {policy}" for k in sorted(params)])
    return model
