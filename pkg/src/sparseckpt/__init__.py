"""Sparse checkpointing for mixture-of-experts training: schedules, a toy engine and a cluster simulator."""

from .core import (
    DEFAULT_PLAN,
    PRECISION_PLANS,
    ConfigError,
    ModelSpec,
    OperatorDescriptor,
    OperatorKind,
    PrecisionPlan,
    SnapshotMode,
    dense_checkpoint_size,
)
from .schedule import SparseSchedule, find_window_size, generate_schedule, order_operators, plan_schedule

__version__ = "0.1.0"
