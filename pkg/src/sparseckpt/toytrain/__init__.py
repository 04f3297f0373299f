"""Miniature MoE training engine used to check checkpoint/recovery correctness."""

from .engine import (
    ACTIVE,
    FROZEN,
    Batch,
    DataStream,
    OperatorMode,
    OpState,
    ToyConfig,
    TrainState,
    execute,
    init_state,
    layout,
    model_spec,
    operator_ids,
    optimizer_step_adam,
    optimizer_step_sgd,
    run,
    run_iteration,
)
from .logs import BWD, FWD, MissingLogEntry, UpstreamLog, gc_logs
from .numerics import quantize
from .serialize import CorruptRecord, from_bytes, to_bytes
from .snapshot import (
    SnapshotRecord,
    SparseCheckpoint,
    apply_record,
    load_dense,
    snapshot_cost_model,
    take_dense_checkpoint,
    take_sparse_snapshot,
)
