"""Deterministic miniature MoE trainer.

Each layer is a residual non-expert MLP followed by a top-k gate and E expert
MLPs.  Forward and input-gradient computation always read the compute-precision
weights; weight gradients, data-parallel reduction and the optimizer step run
only for operators whose mode is ``ACTIVE``.

Layers are grouped into pipeline stages.  ``execute`` can run any contiguous
subset of stages, reading the stage inputs and output gradients either from the
data stream / loss head or from an :class:`UpstreamLog`, which is what the
recovery code uses to replay a single segment of the pipeline.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from ..core import (
    ModelSpec,
    OperatorDescriptor,
    OperatorKind,
    PrecisionPlan,
    expert_id,
    gate_id,
    non_expert_id,
)
from .logs import BWD, FWD, UpstreamLog
from .numerics import F32, cmm, csum, quantize


class OperatorMode(str, enum.Enum):
    ACTIVE = "active"
    FROZEN = "frozen"


ACTIVE = OperatorMode.ACTIVE
FROZEN = OperatorMode.FROZEN


@dataclass(frozen=True)
class ToyConfig:
    layers: int = 3
    experts: int = 4
    top_k: int = 2
    d_model: int = 8
    expert_hidden: int | None = 16  # None -> single linear map
    ne_hidden: int | None = 16
    with_non_expert: bool = True
    residual: bool = True
    tokens: int = 8  # tokens per micro-batch
    microbatches: int = 4
    replicas: int = 1  # data-parallel pipelines
    pp_stages: int = 1
    optimizer: str = "adam"
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    compute_bytes: int = 2
    seed: int = 0
    init_scale: float = 0.5

    def __post_init__(self):
        if not 1 <= self.top_k <= self.experts:
            raise ValueError("top_k must be in [1, experts]")
        if not 1 <= self.pp_stages <= self.layers:
            raise ValueError("pp_stages must be in [1, layers]")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.compute_bytes not in (1, 2, 4):
            raise ValueError("compute_bytes must be 1, 2 or 4")

    @property
    def plan(self) -> PrecisionPlan:
        # float32 master + two float32 moments is what the engine stores
        return PrecisionPlan(self.compute_bytes, 4, 8, name=f"toy-c{self.compute_bytes}")


@dataclass(frozen=True)
class OpLayout:
    id: str
    kind: OperatorKind
    layer: int
    expert: int | None
    shapes: tuple[tuple[str, tuple[int, ...]], ...]

    @property
    def size(self) -> int:
        return int(sum(np.prod(s) for _, s in self.shapes))


def _mlp_shapes(prefix: str, d: int, hidden: int | None):
    if hidden is None:
        return ((prefix, (d, d)),)
    return ((prefix + "1", (d, hidden)), (prefix + "2", (hidden, d)))


def layout(cfg: ToyConfig) -> list[OpLayout]:
    """Operators in canonical order: per layer NE, G, E0..E{E-1}."""
    ops = []
    for l in range(cfg.layers):
        if cfg.with_non_expert:
            ops.append(OpLayout(non_expert_id(l), OperatorKind.NON_EXPERT, l, None,
                                _mlp_shapes("A", cfg.d_model, cfg.ne_hidden)))
        ops.append(OpLayout(gate_id(l), OperatorKind.GATE, l, None, (("Wg", (cfg.d_model, cfg.experts)),)))
        for j in range(cfg.experts):
            ops.append(OpLayout(expert_id(l, j), OperatorKind.EXPERT, l, j,
                                _mlp_shapes("B", cfg.d_model, cfg.expert_hidden)))
    return ops


def operator_ids(cfg: ToyConfig) -> list[str]:
    return [o.id for o in layout(cfg)]


def operator_descriptors(cfg: ToyConfig) -> list[OperatorDescriptor]:
    return [OperatorDescriptor(o.id, o.kind, o.layer, o.size, expert=o.expert,
                               capacity=float(cfg.tokens * cfg.microbatches) if o.expert is not None else None)
            for o in layout(cfg)]


def model_spec(cfg: ToyConfig) -> ModelSpec:
    return ModelSpec(f"toy-{cfg.layers}x{cfg.experts}", cfg.layers, cfg.experts, cfg.top_k,
                     tuple(operator_descriptors(cfg)), d_model=cfg.d_model, d_expert=cfg.expert_hidden or 0)


def stage_layers(cfg: ToyConfig) -> list[list[int]]:
    return [list(map(int, g)) for g in np.array_split(np.arange(cfg.layers), cfg.pp_stages)]


def stage_of_layer(cfg: ToyConfig) -> dict[int, int]:
    return {l: s for s, ls in enumerate(stage_layers(cfg)) for l in ls}


def stage_op_ids(cfg: ToyConfig, stage: int) -> list[str]:
    layers = set(stage_layers(cfg)[stage])
    return [o.id for o in layout(cfg) if o.layer in layers]


@dataclass
class OpState:
    """Per-operator training state.  ``master``/``m``/``v`` are None when not resident."""

    compute: np.ndarray
    master: np.ndarray | None = None
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    step: int = 0

    @property
    def resident(self) -> bool:
        return self.master is not None

    def copy(self) -> "OpState":
        c = lambda a: None if a is None else a.copy()
        return OpState(self.compute.copy(), c(self.master), c(self.m), c(self.v), self.step)


@dataclass
class TrainState:
    cfg: ToyConfig
    ops: dict[str, OpState]
    iteration: int = 0  # completed iterations
    cursor: int = 0  # data-stream position: next iteration reads batch ``cursor + 1``

    @property
    def seed(self) -> int:
        return self.cfg.seed

    def copy(self) -> "TrainState":
        return TrainState(self.cfg, {k: v.copy() for k, v in self.ops.items()}, self.iteration, self.cursor)

    def all_modes(self, mode: OperatorMode = ACTIVE) -> dict[str, OperatorMode]:
        return {k: mode for k in self.ops}


def init_state(cfg: ToyConfig) -> TrainState:
    rng = np.random.default_rng([cfg.seed, 0])
    ops = {}
    for o in layout(cfg):
        master = np.concatenate([
            (rng.standard_normal(int(np.prod(s))) * cfg.init_scale / np.sqrt(s[0])).astype(F32)
            for _, s in o.shapes
        ])
        ops[o.id] = OpState(quantize(master, cfg.compute_bytes), master, np.zeros_like(master),
                            np.zeros_like(master), 0)
    return TrainState(cfg, ops, 0, 0)


def set_master(state: TrainState, op_id: str, master: np.ndarray) -> None:
    """Overwrite one operator's master weights in place (and refresh its compute copy)."""
    st = state.ops[op_id]
    st.master = np.asarray(master, dtype=F32).reshape(-1).copy()
    st.compute = quantize(st.master, state.cfg.compute_bytes)


def _views(lay: OpLayout, flat: np.ndarray) -> dict[str, np.ndarray]:
    out, off = {}, 0
    for name, shape in lay.shapes:
        n = int(np.prod(shape))
        out[name] = flat[off : off + n].reshape(shape)
        off += n
    return out


# ----------------------------------------------------------------------------- data


@dataclass(frozen=True)
class DataStream:
    """Counter-based synthetic data: micro-batch (t, r, b) is a pure function of the seed."""

    cfg: ToyConfig

    def teacher(self) -> np.ndarray:
        rng = np.random.default_rng([self.cfg.seed, 2])
        return (rng.standard_normal((self.cfg.d_model, self.cfg.d_model)) / np.sqrt(self.cfg.d_model)).astype(F32)

    def micro_batch(self, iteration: int, replica: int, mb: int) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng([self.cfg.seed, 1, iteration, replica, mb])
        x = rng.standard_normal((self.cfg.tokens, self.cfg.d_model)).astype(F32)
        t = np.tanh(cmm(x, self.teacher())).astype(F32)
        return x, t

    def batch(self, iteration: int) -> "Batch":
        return Batch(tuple(tuple(self.micro_batch(iteration, r, b) for b in range(self.cfg.microbatches))
                           for r in range(self.cfg.replicas)))


@dataclass(frozen=True)
class Batch:
    """``data[replica][mb] = (x, target)``."""

    data: tuple

    @classmethod
    def single(cls, x, t) -> "Batch":
        return cls((((np.asarray(x, dtype=F32), np.asarray(t, dtype=F32)),),))


# ----------------------------------------------------------------------------- layers


def _relu(x):
    return np.maximum(x, F32(0))


def _mlp_fwd(w: dict, prefix: str, x: np.ndarray):
    if prefix in w:
        return cmm(x, w[prefix]), (x, None)
    h = _relu(cmm(x, w[prefix + "1"]))
    return cmm(h, w[prefix + "2"]), (x, h)


def _mlp_bwd(w: dict, prefix: str, cache, dy: np.ndarray, want_w: bool):
    x, h = cache
    grads = {}
    if h is None:
        if want_w:
            grads[prefix] = cmm(x.T, dy)
        return cmm(dy, w[prefix].T), grads
    dh = cmm(dy, w[prefix + "2"].T) * (h > 0)
    if want_w:
        grads[prefix + "2"] = cmm(h.T, dy)
        grads[prefix + "1"] = cmm(x.T, dh)
    return cmm(dh, w[prefix + "1"].T), grads


def _topk(logits: np.ndarray, k: int) -> np.ndarray:
    # stable sort of negated scores: equal logits keep the lower expert index first
    return np.argsort(-logits, axis=1, kind="stable")[:, :k]


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z).astype(F32)
    return (e / csum(e, axis=1)[:, None]).astype(F32)


class _Layer:
    """Forward/backward of one MoE layer against a fixed set of compute weights."""

    def __init__(self, cfg: ToyConfig, lays: Mapping[str, OpLayout], ops: Mapping[str, OpState], layer: int):
        self.cfg = cfg
        self.l = layer
        self.ne = non_expert_id(layer) if cfg.with_non_expert else None
        self.g = gate_id(layer)
        self.ex = [expert_id(layer, j) for j in range(cfg.experts)]
        self.w = {i: _views(lays[i], ops[i].compute) for i in ([self.ne] if self.ne else []) + [self.g] + self.ex}

    def forward(self, u: np.ndarray):
        cfg = self.cfg
        cache = {"u": u}
        if self.ne:
            h, cache["ne"] = _mlp_fwd(self.w[self.ne], "A", u)
            u1 = (u + h) if cfg.residual else h
        else:
            u1 = u
        cache["u1"] = u1
        logits = cmm(u1, self.w[self.g]["Wg"])
        sel = _topk(logits, cfg.top_k)
        gw = _softmax_rows(np.take_along_axis(logits, sel, axis=1))
        n, d = u1.shape
        y = np.zeros((n, cfg.top_k, d), dtype=F32)
        ecache = {}
        for j in range(cfg.experts):
            rows, slots = np.nonzero(sel == j)
            if rows.size == 0:
                continue
            yj, ecache[j] = _mlp_fwd(self.w[self.ex[j]], "B", u1[rows])
            y[rows, slots] = yj
            ecache[j] = (rows, slots, ecache[j])
        out = u1.copy() if cfg.residual else np.zeros_like(u1)
        for k in range(cfg.top_k):
            out += gw[:, k : k + 1] * y[:, k]
        cache.update(sel=sel, gw=gw, y=y, ecache=ecache)
        return out, cache

    def backward(self, cache, dout: np.ndarray, active: Mapping[str, bool]):
        cfg = self.cfg
        sel, gw, y, u1 = cache["sel"], cache["gw"], cache["y"], cache["u1"]
        n, d = u1.shape
        grads = {}
        dx_slots = np.zeros((n, cfg.top_k, d), dtype=F32)
        for j in range(cfg.experts):
            if j not in cache["ecache"]:
                if active[self.ex[j]]:
                    grads[self.ex[j]] = {nm: np.zeros_like(w) for nm, w in self.w[self.ex[j]].items()}
                continue
            rows, slots, ec = cache["ecache"][j]
            dyj = gw[rows, slots][:, None] * dout[rows]
            dxj, gj = _mlp_bwd(self.w[self.ex[j]], "B", ec, dyj, active[self.ex[j]])
            dx_slots[rows, slots] = dxj
            if active[self.ex[j]]:
                grads[self.ex[j]] = gj
        # gate: d loss / d gating weight, then softmax backward over the selected logits
        dg = csum(np.moveaxis(dout[:, None, :] * y, 2, 0), axis=0)  # (n, k)
        dot = csum((gw * dg).T, axis=0)
        dsel = gw * (dg - dot[:, None])
        dlogits = np.zeros((n, cfg.experts), dtype=F32)
        np.put_along_axis(dlogits, sel, dsel, axis=1)
        if active[self.g]:
            grads[self.g] = {"Wg": cmm(u1.T, dlogits)}
        du1 = dout.copy() if cfg.residual else np.zeros_like(dout)
        for k in range(cfg.top_k):
            du1 += dx_slots[:, k]
        du1 += cmm(dlogits, self.w[self.g]["Wg"].T)
        if not self.ne:
            return du1, grads
        dh = du1
        du, gne = _mlp_bwd(self.w[self.ne], "A", cache["ne"], dh, active[self.ne])
        if cfg.residual:
            du = du1 + du
        if active[self.ne]:
            grads[self.ne] = gne
        return du, grads


# ----------------------------------------------------------------------------- optimizer


def optimizer_step_adam(master, m, v, grad, step: int, lr: float, beta1: float = 0.9,
                        beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update.  Returns (master', m', v', step + 1)."""
    dt = np.asarray(master).dtype
    t = step + 1
    m = (beta1 * m + (1 - beta1) * grad).astype(dt)
    v = (beta2 * v + (1 - beta2) * grad * grad).astype(dt)
    mhat = m / dt.type(1 - beta1 ** t)
    vhat = v / dt.type(1 - beta2 ** t)
    master = (master - dt.type(lr) * mhat / (np.sqrt(vhat) + dt.type(eps))).astype(dt)
    return master, m, v, t


def optimizer_step_sgd(master, grad, step: int, lr: float):
    dt = np.asarray(master).dtype
    return (master - dt.type(lr) * grad).astype(dt), step + 1


# ----------------------------------------------------------------------------- iteration


@dataclass
class IterationResult:
    state: TrainState
    loss: float
    expert_tokens: np.ndarray  # (layers, experts) hard counts
    expert_soft: np.ndarray  # (layers, experts) summed gating weight
    stage_outputs: dict = field(default_factory=dict)


def _flat_grad(lay: OpLayout, g: Mapping[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([g[name].reshape(-1) for name, _ in lay.shapes]).astype(F32)


def _check_modes(state: TrainState, modes: Mapping[str, OperatorMode], op_ids: Iterable[str]):
    for i in op_ids:
        if i not in modes:
            raise KeyError(f"mode map missing operator {i}")
        if OperatorMode(modes[i]) == ACTIVE and not state.ops[i].resident:
            raise ValueError(f"operator {i} is Active but its master state is not resident")


def execute(
    state: TrainState,
    modes: Mapping[str, OperatorMode],
    batch: Batch | None = None,
    *,
    stages: Sequence[int] | None = None,
    log: UpstreamLog | None = None,
    source: UpstreamLog | None = None,
    data: DataStream | None = None,
) -> IterationResult:
    """Run iteration ``state.iteration + 1`` over ``stages`` (default: the whole pipeline).

    Inputs of the first selected stage come from the batch when it is stage 0,
    otherwise from ``source``'s logged forward activations.  Output gradients
    of the last selected stage come from the loss head when it is the final
    stage, otherwise from ``source``'s logged backward gradients.  When ``log``
    is given, every boundary tensor sent by a selected stage is recorded there.
    """
    cfg = state.cfg
    it = state.iteration + 1
    all_stages = list(range(cfg.pp_stages))
    stages = all_stages if stages is None else sorted(stages)
    if stages != list(range(stages[0], stages[-1] + 1)):
        raise ValueError("stages must be contiguous")
    a, b = stages[0], stages[-1]
    sl = stage_layers(cfg)
    layers = [l for s in stages for l in sl[s]]
    lays = {o.id: o for o in layout(cfg)}
    op_ids = [o.id for o in layout(cfg) if o.layer in set(layers)]
    _check_modes(state, modes, op_ids)
    active = {i: OperatorMode(modes[i]) == ACTIVE for i in op_ids}
    need_data = a == 0 or b == cfg.pp_stages - 1
    if batch is None and need_data:
        batch = (data or DataStream(cfg)).batch(it)
    if batch is not None:
        if len(batch.data) != cfg.replicas or any(len(r) != cfg.microbatches for r in batch.data):
            raise ValueError(f"batch must have {cfg.replicas} replicas x {cfg.microbatches} micro-batches")
    if (a > 0 or b < cfg.pp_stages - 1) and source is None:
        raise ValueError("partial-pipeline execution needs a boundary log source")

    mods = {l: _Layer(cfg, lays, state.ops, l) for l in layers}
    layer_stage = stage_of_layer(cfg)
    counts = np.zeros((cfg.layers, cfg.experts), dtype=np.int64)
    soft = np.zeros((cfg.layers, cfg.experts), dtype=np.float64)
    replica_grads = []
    loss_total = 0.0
    stage_out = {}
    for r in range(cfg.replicas):
        acc: dict[str, np.ndarray] = {}
        for mb in range(cfg.microbatches):
            if a == 0:
                u, target = batch.data[r][mb]
            else:
                u = source.get(it, r, mb, a - 1, FWD)
                target = batch.data[r][mb][1] if batch is not None else None
            caches = []
            for l in layers:
                u, c = mods[l].forward(u)
                caches.append(c)
                s = layer_stage[l]
                if sl[s][-1] == l and s < cfg.pp_stages - 1 and s in stages:
                    if log is not None:
                        log.record(it, r, mb, s, FWD, u, owner=s)
            stage_out[(r, mb)] = u
            if b == cfg.pp_stages - 1:
                n, d = u.shape
                diff = u - target
                loss_total += 0.5 * float(csum((diff * diff).reshape(-1))) / (n * d)
                dy = (diff * F32(1.0 / (n * d * cfg.microbatches * cfg.replicas))).astype(F32)
            else:
                dy = source.get(it, r, mb, b, BWD)
            for l, c in zip(reversed(layers), reversed(caches)):
                dy, g = mods[l].backward(c, dy, active)
                for op, gd in g.items():
                    flat = _flat_grad(lays[op], gd)
                    if op in acc:
                        acc[op] += flat
                    else:
                        acc[op] = flat
                s = layer_stage[l]
                if sl[s][0] == l and s > 0 and log is not None:
                    log.record(it, r, mb, s - 1, BWD, dy, owner=s)
            for l, c in zip(layers, caches):
                sel, gw = c["sel"], c["gw"]
                counts[l] += np.bincount(sel.reshape(-1), minlength=cfg.experts)
                np.add.at(soft[l], sel.reshape(-1), gw.reshape(-1).astype(np.float64))
        replica_grads.append(acc)

    new_ops = dict(state.ops)
    for op in op_ids:
        if not active[op]:
            continue
        g = replica_grads[0][op].copy()
        for rg in replica_grads[1:]:  # data-parallel reduction in replica order
            g += rg[op]
        st = state.ops[op]
        if cfg.optimizer == "adam":
            mst, m, v, step = optimizer_step_adam(st.master, st.m, st.v, g, st.step, cfg.lr, cfg.beta1,
                                                  cfg.beta2, cfg.eps)
        else:
            mst, step = optimizer_step_sgd(st.master, g, st.step, cfg.lr)
            m, v = st.m, st.v
        new_ops[op] = OpState(quantize(mst, cfg.compute_bytes), mst, m, v, step)
    new_state = TrainState(cfg, new_ops, it, state.cursor + 1)
    return IterationResult(new_state, loss_total / (cfg.microbatches * cfg.replicas), counts, soft, stage_out)


def run_iteration(state: TrainState, modes: Mapping[str, OperatorMode] | None = None,
                  batch: Batch | None = None, log: UpstreamLog | None = None) -> TrainState:
    """Advance the whole pipeline by one iteration."""
    modes = state.all_modes() if modes is None else modes
    missing = [i for i in state.ops if i not in modes]
    if missing:
        raise KeyError(f"mode map missing operator {missing[0]}")
    return execute(state, modes, batch, log=log).state


def run(state: TrainState, iterations: int, log: UpstreamLog | None = None,
        on_iteration=None) -> TrainState:
    """Fault-free training for ``iterations`` steps; ``on_iteration(result)`` sees every step."""
    modes = state.all_modes()
    for _ in range(iterations):
        res = execute(state, modes, log=log)
        state = res.state
        if on_iteration is not None:
            on_iteration(res)
    return state


def stage_state(state: TrainState, stage: int) -> dict[str, OpState]:
    return {i: state.ops[i] for i in stage_op_ids(state.cfg, stage)}


def with_config(state: TrainState, **changes) -> TrainState:
    s = state.copy()
    s.cfg = replace(state.cfg, **changes)
    return s
