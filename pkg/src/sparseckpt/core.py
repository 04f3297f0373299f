"""Shared vocabulary: precision plans, operators, model/cluster/parallel
descriptors and checkpoint size arithmetic.

Every descriptor is a frozen dataclass with ``to_dict``/``from_dict`` so it can
be written to and read back from the YAML configuration files used by the CLI.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

# iteration counter + RNG/data cursor; fixed because no absolute value is known
METADATA_BYTES = 4096


class ConfigError(ValueError):
    """Raised when a configuration is inconsistent. ``violations`` lists every problem."""

    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class SnapshotMode(str, enum.Enum):
    FULL = "full"
    COMPUTE_ONLY = "compute_only"


class OperatorKind(str, enum.Enum):
    EXPERT = "expert"
    NON_EXPERT = "non_expert"
    GATE = "gate"


@dataclass(frozen=True)
class PrecisionPlan:
    compute_bytes: int = 2
    master_bytes: int = 4
    optimizer_bytes: int = 8
    name: str = "fp16/fp32/fp32+fp32"

    def __post_init__(self):
        for f in ("compute_bytes", "master_bytes", "optimizer_bytes"):
            if getattr(self, f) < 1:
                raise ConfigError([f"precision.{f} must be >= 1"])

    @property
    def full_bytes(self) -> int:
        return self.master_bytes + self.optimizer_bytes

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "compute_bytes": self.compute_bytes,
            "master_bytes": self.master_bytes,
            "optimizer_bytes": self.optimizer_bytes,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PrecisionPlan":
        if "preset" in d:
            return PRECISION_PLANS[d["preset"]]
        return cls(
            compute_bytes=int(d.get("compute_bytes", 2)),
            master_bytes=int(d.get("master_bytes", 4)),
            optimizer_bytes=int(d.get("optimizer_bytes", 8)),
            name=str(d.get("name", "custom")),
        )


DEFAULT_PLAN = PrecisionPlan()

# compute / master / optimizer-state rows of the low-precision comparison
PRECISION_PLANS: dict[str, PrecisionPlan] = {
    "fp16/fp32/fp32+fp32": DEFAULT_PLAN,
    "fp16/fp16/fp16+fp16": PrecisionPlan(2, 2, 4, "fp16/fp16/fp16+fp16"),
    "fp8/fp32/fp32+fp32": PrecisionPlan(1, 4, 8, "fp8/fp32/fp32+fp32"),
    "fp8/fp16/fp32+fp32": PrecisionPlan(1, 2, 8, "fp8/fp16/fp32+fp32"),
    "fp8/fp16/fp8+fp16": PrecisionPlan(1, 2, 3, "fp8/fp16/fp8+fp16"),
    "fp8/fp8/fp8+fp16": PrecisionPlan(1, 1, 3, "fp8/fp8/fp8+fp16"),
}


@dataclass(frozen=True)
class Popularity:
    """Activation statistics of one operator.

    ``hard`` counts tokens routed to the expert, ``soft`` sums the gating
    probability it received and ``ema`` is the time-decayed count.
    """

    hard: float = 0.0
    soft: float = 0.0
    ema: float = 0.0

    def observe(self, hard: float, soft: float = 0.0) -> "Popularity":
        if hard < 0 or soft < 0:
            raise ValueError("popularity increments must be non-negative")
        return Popularity(self.hard + hard, self.soft + soft, self.ema)

    def decay(self, alpha: float, batch_count: float) -> "Popularity":
        return Popularity(self.hard, self.soft, alpha * self.ema + (1.0 - alpha) * batch_count)

    def to_dict(self) -> dict:
        return {"hard": self.hard, "soft": self.soft, "ema": self.ema}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Popularity":
        return cls(float(d.get("hard", 0.0)), float(d.get("soft", 0.0)), float(d.get("ema", 0.0)))


@dataclass(frozen=True)
class OperatorDescriptor:
    id: str
    kind: OperatorKind
    layer: int
    param_count: int
    expert: int | None = None
    capacity: float | None = None
    popularity: Popularity = field(default_factory=Popularity)

    def __post_init__(self):
        if self.param_count <= 0:
            raise ConfigError([f"operator {self.id}: param_count must be > 0"])
        if self.kind == OperatorKind.EXPERT:
            if self.expert is None:
                raise ConfigError([f"operator {self.id}: expert index missing"])
            if self.capacity is not None and self.capacity <= 0:
                raise ConfigError([f"operator {self.id}: capacity must be > 0"])

    @property
    def is_expert(self) -> bool:
        return self.kind == OperatorKind.EXPERT

    def with_popularity(self, popularity: Popularity) -> "OperatorDescriptor":
        return replace(self, popularity=popularity)

    def to_dict(self) -> dict:
        d = {
            "id": self.id,
            "kind": self.kind.value,
            "layer": self.layer,
            "param_count": self.param_count,
            "popularity": self.popularity.to_dict(),
        }
        if self.expert is not None:
            d["expert"] = self.expert
        if self.capacity is not None:
            d["capacity"] = self.capacity
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "OperatorDescriptor":
        return cls(
            id=str(d["id"]),
            kind=OperatorKind(d["kind"]),
            layer=int(d["layer"]),
            param_count=int(d["param_count"]),
            expert=None if d.get("expert") is None else int(d["expert"]),
            capacity=None if d.get("capacity") is None else float(d["capacity"]),
            popularity=Popularity.from_dict(d.get("popularity", {})),
        )


def expert_id(layer: int, expert: int) -> str:
    return f"L{layer}.E{expert}"


def non_expert_id(layer: int) -> str:
    return f"L{layer}.NE"


def gate_id(layer: int) -> str:
    return f"L{layer}.G"


@dataclass(frozen=True)
class ModelSpec:
    name: str
    layers: int
    experts_per_layer: int
    top_k: int
    operators: tuple[OperatorDescriptor, ...]
    shared_experts: int = 0
    d_model: int = 0
    d_expert: int = 0

    def __post_init__(self):
        v = []
        if not 1 <= self.top_k <= self.experts_per_layer:
            v.append(f"model.top_k must be in [1, {self.experts_per_layer}]")
        kinds = [o.kind for o in self.operators]
        n_exp = kinds.count(OperatorKind.EXPERT)
        if n_exp != self.layers * self.experts_per_layer:
            v.append(f"model.operators: expected {self.layers * self.experts_per_layer} experts, got {n_exp}")
        if kinds.count(OperatorKind.GATE) != self.layers:
            v.append("model.operators: expected one gate per layer")
        if kinds.count(OperatorKind.NON_EXPERT) != self.layers:
            v.append("model.operators: expected one non-expert operator per layer")
        ids = [o.id for o in self.operators]
        if len(set(ids)) != len(ids):
            v.append("model.operators: duplicate operator ids")
        if v:
            raise ConfigError(v)

    @classmethod
    def build(
        cls,
        name: str,
        layers: int,
        experts_per_layer: int,
        top_k: int,
        expert_params: int,
        non_expert_params: int,
        gate_params: int | None = None,
        shared_experts: int = 0,
        capacity: float | None = None,
        d_model: int = 0,
        d_expert: int = 0,
    ) -> "ModelSpec":
        """Uniform model: every layer has the same per-operator parameter counts."""
        gate_params = gate_params if gate_params is not None else max(1, d_model * experts_per_layer)
        ops: list[OperatorDescriptor] = []
        for l in range(layers):
            ops.append(OperatorDescriptor(non_expert_id(l), OperatorKind.NON_EXPERT, l, non_expert_params))
            ops.append(OperatorDescriptor(gate_id(l), OperatorKind.GATE, l, gate_params))
            for j in range(experts_per_layer):
                ops.append(
                    OperatorDescriptor(expert_id(l, j), OperatorKind.EXPERT, l, expert_params, expert=j, capacity=capacity)
                )
        return cls(name, layers, experts_per_layer, top_k, tuple(ops), shared_experts, d_model, d_expert)

    @classmethod
    def from_dimensions(
        cls,
        name: str,
        layers: int,
        experts_per_layer: int,
        top_k: int,
        d_model: int,
        d_expert: int,
        shared_experts: int = 0,
        attention_params: int | None = None,
        capacity: float | None = None,
    ) -> "ModelSpec":
        # two-matrix FFN experts; shared experts are folded into the non-expert block
        expert_params = 2 * d_model * d_expert
        attn = attention_params if attention_params is not None else 4 * d_model * d_model
        non_expert = attn + shared_experts * expert_params
        return cls.build(
            name, layers, experts_per_layer, top_k, expert_params, non_expert,
            gate_params=d_model * experts_per_layer, shared_experts=shared_experts,
            capacity=capacity, d_model=d_model, d_expert=d_expert,
        )

    @property
    def total_params(self) -> int:
        return sum(o.param_count for o in self.operators)

    def op(self, op_id: str) -> OperatorDescriptor:
        for o in self.operators:
            if o.id == op_id:
                return o
        raise KeyError(op_id)

    def experts(self) -> list[OperatorDescriptor]:
        return [o for o in self.operators if o.is_expert]

    def with_operators(self, operators: Iterable[OperatorDescriptor]) -> "ModelSpec":
        return replace(self, operators=tuple(operators))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "layers": self.layers,
            "experts_per_layer": self.experts_per_layer,
            "top_k": self.top_k,
            "shared_experts": self.shared_experts,
            "d_model": self.d_model,
            "d_expert": self.d_expert,
            "operators": [o.to_dict() for o in self.operators],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ModelSpec":
        if "operators" in d:
            return cls(
                name=str(d.get("name", "model")),
                layers=int(d["layers"]),
                experts_per_layer=int(d["experts_per_layer"]),
                top_k=int(d["top_k"]),
                operators=tuple(OperatorDescriptor.from_dict(o) for o in d["operators"]),
                shared_experts=int(d.get("shared_experts", 0)),
                d_model=int(d.get("d_model", 0)),
                d_expert=int(d.get("d_expert", 0)),
            )
        if "expert_params" in d:
            return cls.build(
                str(d.get("name", "model")), int(d["layers"]), int(d["experts_per_layer"]), int(d["top_k"]),
                int(d["expert_params"]), int(d["non_expert_params"]),
                gate_params=None if d.get("gate_params") is None else int(d["gate_params"]),
                shared_experts=int(d.get("shared_experts", 0)),
                capacity=None if d.get("capacity") is None else float(d["capacity"]),
                d_model=int(d.get("d_model", 0)),
            )
        return cls.from_dimensions(
            str(d.get("name", "model")), int(d["layers"]), int(d["experts_per_layer"]), int(d["top_k"]),
            int(d["d_model"]), int(d["d_expert"]), shared_experts=int(d.get("shared_experts", 0)),
            attention_params=None if d.get("attention_params") is None else int(d["attention_params"]),
            capacity=None if d.get("capacity") is None else float(d["capacity"]),
        )


@dataclass(frozen=True)
class ClusterSpec:
    nodes: int
    gpus_per_node: int
    pcie_bandwidth: float  # bytes/s, GPU -> host
    replication_bandwidth: float  # bytes/s, host -> peer hosts
    nccl: Mapping[int, tuple[float, float]] = field(default_factory=dict)  # p -> (alpha s, beta s/B)
    cpu_mem_per_node: float = 880e9
    persist_bandwidth: float = 5e9  # bytes/s to remote storage (disk-based baseline)

    def __post_init__(self):
        v = []
        for f in ("pcie_bandwidth", "replication_bandwidth", "persist_bandwidth"):
            if not getattr(self, f) > 0:
                v.append(f"cluster.{f} must be > 0")
        if self.nodes < 1 or self.gpus_per_node < 1:
            v.append("cluster.nodes and cluster.gpus_per_node must be >= 1")
        if v:
            raise ConfigError(v)

    @property
    def gpus(self) -> int:
        return self.nodes * self.gpus_per_node

    def to_dict(self) -> dict:
        return {
            "nodes": self.nodes,
            "gpus_per_node": self.gpus_per_node,
            "pcie_bandwidth": self.pcie_bandwidth,
            "replication_bandwidth": self.replication_bandwidth,
            "persist_bandwidth": self.persist_bandwidth,
            "cpu_mem_per_node": self.cpu_mem_per_node,
            "nccl": {int(p): [a, b] for p, (a, b) in self.nccl.items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ClusterSpec":
        return cls(
            nodes=int(d["nodes"]),
            gpus_per_node=int(d["gpus_per_node"]),
            pcie_bandwidth=float(d["pcie_bandwidth"]),
            replication_bandwidth=float(d["replication_bandwidth"]),
            persist_bandwidth=float(d.get("persist_bandwidth", 5e9)),
            cpu_mem_per_node=float(d.get("cpu_mem_per_node", 880e9)),
            nccl={int(p): (float(v[0]), float(v[1])) for p, v in (d.get("nccl") or {}).items()},
        )


@dataclass(frozen=True)
class ParallelPlan:
    pp_stages: int
    dp_degree: int
    ep_degree: int
    microbatches: int
    global_batch: int
    microbatch_size: int
    stage_map: Mapping[str, int] = field(default_factory=dict)

    @classmethod
    def layerwise(cls, model: ModelSpec, pp_stages: int, dp_degree: int = 1, ep_degree: int = 1,
                  global_batch: int | None = None, microbatch_size: int = 1,
                  microbatches: int | None = None) -> "ParallelPlan":
        """Split layers into contiguous, nearly equal stage groups."""
        groups = np.array_split(np.arange(model.layers), pp_stages)
        layer_stage = {int(l): s for s, g in enumerate(groups) for l in g}
        stage_map = {o.id: layer_stage[o.layer] for o in model.operators}
        if microbatches is None:
            if global_batch is None:
                raise ValueError("need microbatches or global_batch")
            microbatches = global_batch // (dp_degree * microbatch_size)
        if global_batch is None:
            global_batch = microbatches * microbatch_size * dp_degree
        return cls(pp_stages, dp_degree, ep_degree, microbatches, global_batch, microbatch_size, stage_map)

    def stage_of(self, op_id: str) -> int:
        return self.stage_map[op_id]

    def stage_ops(self, stage: int) -> list[str]:
        return [o for o, s in self.stage_map.items() if s == stage]

    def to_dict(self) -> dict:
        return {
            "pp_stages": self.pp_stages,
            "dp_degree": self.dp_degree,
            "ep_degree": self.ep_degree,
            "microbatches": self.microbatches,
            "global_batch": self.global_batch,
            "microbatch_size": self.microbatch_size,
            "stage_map": dict(self.stage_map),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], model: ModelSpec | None = None) -> "ParallelPlan":
        if not d.get("stage_map") and model is not None:
            return cls.layerwise(
                model, int(d.get("pp_stages", 1)), int(d.get("dp_degree", 1)), int(d.get("ep_degree", 1)),
                global_batch=None if d.get("global_batch") is None else int(d["global_batch"]),
                microbatch_size=int(d.get("microbatch_size", 1)),
                microbatches=None if d.get("microbatches") is None else int(d["microbatches"]),
            )
        return cls(
            pp_stages=int(d["pp_stages"]),
            dp_degree=int(d["dp_degree"]),
            ep_degree=int(d.get("ep_degree", 1)),
            microbatches=int(d["microbatches"]),
            global_batch=int(d["global_batch"]),
            microbatch_size=int(d["microbatch_size"]),
            stage_map={str(k): int(v) for k, v in (d.get("stage_map") or {}).items()},
        )


@dataclass(frozen=True)
class OperatorSizes:
    compute: int
    master: int
    optim: int

    @property
    def full(self) -> int:
        return self.master + self.optim


@dataclass(frozen=True)
class ProfiledStats:
    """Profiled timings plus per-operator byte sizes for one worker."""

    stage_times: tuple[float, ...]  # t_s, seconds per micro-batch per stage
    t_sync: float
    t_update: float
    op_sizes: Mapping[str, OperatorSizes] = field(default_factory=dict)
    t_iter: float | None = None  # measured; derived from the pipeline model when absent
    microbatches: int = 1

    def __post_init__(self):
        if self.iteration_time <= 0:
            raise ConfigError(["profile.t_iter must be > 0"])

    @property
    def iteration_time(self) -> float:
        if self.t_iter is not None:
            return self.t_iter
        s = len(self.stage_times)
        return (self.microbatches + s - 1) * max(self.stage_times) + self.t_sync + self.t_update

    @classmethod
    def from_model(cls, model: ModelSpec, plan: PrecisionPlan, stage_times: Sequence[float],
                   t_sync: float, t_update: float, op_ids: Iterable[str] | None = None,
                   t_iter: float | None = None, microbatches: int = 1) -> "ProfiledStats":
        ids = set(op_ids) if op_ids is not None else None
        sizes = {
            o.id: OperatorSizes(o.param_count * plan.compute_bytes, o.param_count * plan.master_bytes,
                                o.param_count * plan.optimizer_bytes)
            for o in model.operators if ids is None or o.id in ids
        }
        return cls(tuple(stage_times), t_sync, t_update, sizes, t_iter, microbatches)

    def to_dict(self) -> dict:
        return {
            "stage_times": list(self.stage_times),
            "t_sync": self.t_sync,
            "t_update": self.t_update,
            "t_iter": self.t_iter,
            "microbatches": self.microbatches,
            "op_sizes": {k: [v.compute, v.master, v.optim] for k, v in self.op_sizes.items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ProfiledStats":
        return cls(
            stage_times=tuple(float(x) for x in d["stage_times"]),
            t_sync=float(d.get("t_sync", 0.0)),
            t_update=float(d.get("t_update", 0.0)),
            op_sizes={str(k): OperatorSizes(int(v[0]), int(v[1]), int(v[2])) for k, v in (d.get("op_sizes") or {}).items()},
            t_iter=None if d.get("t_iter") is None else float(d["t_iter"]),
            microbatches=int(d.get("microbatches", 1)),
        )


def snapshot_payload_size(op: OperatorDescriptor, mode: SnapshotMode, plan: PrecisionPlan = DEFAULT_PLAN) -> int:
    if SnapshotMode(mode) == SnapshotMode.FULL:
        return op.param_count * plan.full_bytes
    return op.param_count * plan.compute_bytes


@dataclass(frozen=True)
class DenseSize:
    payload_bytes: int
    metadata_bytes: int
    breakdown: Mapping[str, int]

    @property
    def total_bytes(self) -> int:
        return self.payload_bytes + self.metadata_bytes

    def shares(self) -> dict[str, float]:
        tot = sum(self.breakdown.values())
        return {k: v / tot for k, v in self.breakdown.items()}


def dense_checkpoint_size(model: ModelSpec, plan: PrecisionPlan = DEFAULT_PLAN,
                          include_compute_weights: bool = False) -> DenseSize:
    """Size of a dense checkpoint of ``model``.

    ``payload_bytes`` is always the sum of the operators' full payloads (master
    weights + optimizer state).  The breakdown labels that fp32 training state
    as ``*_optimizer`` and the compute-precision weights as ``*_params``; the
    latter are only present (and only counted) when ``include_compute_weights``
    is set, which reproduces the layout of a framework checkpoint that stores
    both files.
    """
    b = {"expert_optimizer": 0, "expert_params": 0, "non_expert_optimizer": 0, "non_expert_params": 0,
         "metadata": METADATA_BYTES}
    payload = 0
    for o in model.operators:
        full = snapshot_payload_size(o, SnapshotMode.FULL, plan)
        payload += full
        prefix = "expert" if o.is_expert else "non_expert"
        b[f"{prefix}_optimizer"] += full
        if include_compute_weights:
            c = snapshot_payload_size(o, SnapshotMode.COMPUTE_ONLY, plan)
            b[f"{prefix}_params"] += c
            payload += c
    return DenseSize(payload, METADATA_BYTES, b)


@dataclass(frozen=True)
class Configuration:
    model: ModelSpec
    plan: ParallelPlan
    cluster: ClusterSpec


def validate(model: ModelSpec, plan: ParallelPlan, cluster: ClusterSpec,
             group_sizes: Iterable[int] | None = None) -> Configuration:
    v: list[str] = []
    for o in model.operators:
        if o.id not in plan.stage_map:
            v.append(f"unmapped operator {o.id}")
        elif not 0 <= plan.stage_map[o.id] < plan.pp_stages:
            v.append(f"parallel.stage_map[{o.id}] out of range")
    if plan.pp_stages < 1:
        v.append("parallel.pp_stages must be >= 1")
    if plan.dp_degree < 1 or plan.global_batch % plan.dp_degree:
        v.append("parallel.dp_degree must divide parallel.global_batch")
    elif plan.microbatches * plan.microbatch_size != plan.global_batch // plan.dp_degree:
        v.append(
            f"parallel.microbatches: {plan.microbatches}x{plan.microbatch_size} != "
            f"{plan.global_batch // plan.dp_degree} (global_batch / dp_degree)"
        )
    needed = set(group_sizes) if group_sizes is not None else {p for p in (plan.dp_degree, plan.ep_degree) if p > 1}
    for p in sorted(needed):
        if p not in cluster.nccl:
            v.append(f"cluster.nccl missing coefficients for group size {p}")
    gpus = plan.pp_stages * plan.dp_degree * plan.ep_degree
    if gpus > cluster.gpus:
        v.append(f"parallel plan needs {gpus} GPUs, cluster.nodes x gpus_per_node = {cluster.gpus}")
    if v:
        raise ConfigError(v)
    return Configuration(model, plan, cluster)


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def isclose_le(a: float, b: float, rel: float = 1e-12) -> bool:
    """a <= b, tolerating floating-point round-off of relative size ``rel``."""
    return a <= b or math.isclose(a, b, rel_tol=rel)
