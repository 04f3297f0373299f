"""Discrete-event cluster simulator: timing, failures, policy models, sweeps."""

from .failures import FailureEvent, FailureTrace, Poisson, from_events, inject_failures, read_trace, synth_trace, write_trace
from .policies import DenseModel, FailureCost, MoCModel, MoEtionModel, PolicyModel, Timing
from .profiles import POLICIES, SHAPES, SimProfile, build_policy, calibrated, gemini_interval, synthetic
from .simulator import METRIC_COLUMNS, Metrics, RecoveryEvent, SimConfig, run_simulation, worker_of
from .timing import analytic_ettr, iteration_time, localized_iteration_time, nccl_time, pipeline_time
