"""Single-threaded event loop over training iterations, failures and recoveries.

Time accounting per run::

    useful + stall + recovery + idle == wall

``useful`` is T_iter per completed iteration of new progress, ``stall`` the
checkpoint stalls of those iterations, ``recovery`` everything between a
failure's arrival and the point where new progress resumes (the aborted
partial iteration, detection, restart, checkpoint load and replay of lost
iterations), and ``idle`` the unfinished tail cut off by the horizon.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..recovery import RecoveryScope, recovery_scope
from .failures import FailureTrace, Poisson, inject_failures
from .policies import FailureCost, PolicyModel

log = logging.getLogger(__name__)

BUCKET_S = 60.0


@dataclass
class SimConfig:
    profile: object  # profiles.SimProfile
    policy: str = "moetion"
    failures: Poisson | FailureTrace | None = None
    horizon: float = 12 * 3600.0
    t_restart: float = 30.0
    detection_delay: float = 5.0
    seed: int = 0
    policy_params: dict = field(default_factory=dict)
    bucket_s: float = BUCKET_S

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError("horizon must be > 0")
        if self.t_restart < 0 or self.detection_delay < 0:
            raise ValueError("restart and detection delays must be >= 0")

    @property
    def mtbf(self) -> float:
        if isinstance(self.failures, Poisson):
            return self.failures.mtbf
        if isinstance(self.failures, FailureTrace):
            return self.failures.mean_gap(self.horizon)
        return math.inf


@dataclass
class RecoveryEvent:
    t: float
    node: int
    wasted_s: float  # aborted partial iteration
    detect_s: float
    restart_s: float
    load_s: float
    replay_s: float
    total_s: float  # wasted_s plus failure arrival to resumed progress
    lost_iterations: int
    stages: tuple[int, ...] = ()
    cascades: int = 0
    tokens_lost: float = 0.0

    @property
    def own_s(self) -> float:
        """Recovery attributable to this failure alone (cascade restarts excluded)."""
        return self.wasted_s + self.detect_s + self.restart_s + self.load_s + self.replay_s


@dataclass
class Metrics:
    model: str
    policy: str
    mtbf_s: float
    label: float  # W_sparse, dense interval or final MoC K
    ettr: float
    iterations: int
    wall_s: float
    useful_s: float
    stall_s: float
    recovery_s: float
    idle_s: float
    t_iter: float
    tokens_lost: float = 0.0
    checkpoints: int = 0
    failures: int = 0
    events: list = field(default_factory=list)
    goodput: list = field(default_factory=list)  # (bucket_start_s, samples_per_s)
    trajectory: list = field(default_factory=list)  # (t, K fraction or interval)
    bucket_values: list = field(default_factory=list)  # trajectory value at each bucket end

    @property
    def overhead_s_per_iter(self) -> float:
        return self.stall_s / self.iterations if self.iterations else 0.0

    @property
    def overhead_pct(self) -> float:
        return 100.0 * self.overhead_s_per_iter / self.t_iter

    @property
    def mean_recovery_s(self) -> float:
        return float(np.mean([e.total_s for e in self.events])) if self.events else 0.0

    def identity_gap(self) -> float:
        return self.useful_s + self.stall_s + self.recovery_s + self.idle_s - self.wall_s

    def row(self) -> dict:
        return {
            "model": self.model,
            "policy": self.policy,
            "mtbf_s": self.mtbf_s,
            "wsparse_or_interval": self.label,
            "overhead_s_per_iter": self.overhead_s_per_iter,
            "overhead_pct": self.overhead_pct,
            "recovery_total_s": self.recovery_s,
            "ettr": self.ettr,
            "tokens_lost": self.tokens_lost,
        }


METRIC_COLUMNS = ("model", "policy", "mtbf_s", "wsparse_or_interval", "overhead_s_per_iter", "overhead_pct",
                  "recovery_total_s", "ettr", "tokens_lost")


def worker_of(node: int, pp_stages: int, dp_degree: int) -> tuple[int, int]:
    """(pipeline, stage) hosted by ``node``; nodes are laid out stage-major within a pipeline."""
    return (node // pp_stages) % dp_degree, node % pp_stages


class _Loop:
    def __init__(self, cfg: SimConfig, model: PolicyModel):
        prof = cfg.profile
        self.cfg = cfg
        self.model = model
        self.T = prof.t_iter
        self.pp, self.dp = prof.pp, prof.dp
        rng = np.random.default_rng([cfg.seed, 3])
        proc = cfg.failures
        if isinstance(proc, Poisson) and proc.nodes == 1 and prof.nodes > 1:
            proc = Poisson(proc.mtbf, prof.nodes)
        self.trace = inject_failures(proc, cfg.horizon, rng)
        self.fi = 0
        self.now = 0.0
        self.progress = 0
        self.useful = self.stall = self.recovery = self.idle = 0.0
        self.events: list[RecoveryEvent] = []
        nb = int(math.ceil(cfg.horizon / cfg.bucket_s))
        self.buckets = np.zeros(nb)
        self.traj = [(0.0, model.trajectory_value)]
        self.tokens_lost = 0.0

    def _next_failure(self) -> float:
        ev = self.trace.events
        return ev[self.fi].t if self.fi < len(ev) else math.inf

    def _cost_end(self, t: float, c: FailureCost) -> float:
        return t + self.cfg.detection_delay + self.cfg.t_restart + c.load_s + c.replay_s

    def _recover(self, tf: float, wasted: float) -> None:
        cfg, model = self.cfg, self.model
        e0 = self.trace.events[self.fi]
        self.fi += 1
        first = worker_of(e0.node, self.pp, self.dp)
        cost = model.failure(tf, self.progress, 1)
        self.tokens_lost += cost.tokens_lost
        scopes: list[RecoveryScope] = recovery_scope([first], self.pp, self.dp) if model.localized else []
        ends = [self._cost_end(tf, cost)]
        cascades = 0
        while self._next_failure() < min(max(ends), cfg.horizon):
            ev = self.trace.events[self.fi]
            self.fi += 1
            cascades += 1
            if not model.localized:
                # global rollback: restart the whole recovery from the same restore point
                ends = [self._cost_end(ev.t, cost)]
                continue
            w = worker_of(ev.node, self.pp, self.dp)
            new = recovery_scope([w], self.pp, self.dp, ongoing=scopes)
            new_ends = []
            for sc in new:
                same = [i for i, o in enumerate(scopes) if o.segment == sc.segment]
                if same and not sc.restarted:
                    new_ends.append(ends[same[0]])
                else:
                    new_ends.append(self._cost_end(ev.t, model.cost(self.progress, len(sc.stages))))
            scopes, ends = new, new_ends
        end = max(ends)
        spent = min(end, cfg.horizon) - tf
        self.recovery += wasted + spent
        self.events.append(RecoveryEvent(
            tf, e0.node, wasted, cfg.detection_delay, cfg.t_restart, cost.load_s, cost.replay_s,
            wasted + end - tf, cost.lost_iterations, tuple(scopes[0].stages) if scopes else (), cascades,
            cost.tokens_lost))
        self.now = min(end, cfg.horizon)
        model.after_recovery(self.now, self.progress)
        self.traj.append((self.now, model.trajectory_value))

    def run(self) -> Metrics:
        cfg, model, T, H = self.cfg, self.model, self.T, self.cfg.horizon
        samples = cfg.profile.samples_per_iter
        bucket_vals = []
        while self.now < H:
            s = model.stall(self.progress, self.now)
            end = self.now + s + T
            tf = self._next_failure()
            if tf < min(end, H):
                # failures while idle between iterations cannot happen: iterations are back to back
                tf = max(tf, self.now)
                wasted = tf - self.now
                self.now = tf
                self._recover(tf, wasted)
                continue
            if end > H:
                self.idle += H - self.now
                self.now = H
                break
            self.useful += T
            self.stall += s
            model.iteration_done(self.progress, end)
            self.progress += 1
            self.now = end
            self.buckets[min(int(end // cfg.bucket_s), self.buckets.size - 1)] += samples
        if self.progress > 0 and model.checkpoints == 0:
            log.warning("%s: no checkpoint was persisted before the %.0f s horizon", model.name, H)
        width = np.minimum(cfg.bucket_s, H - np.arange(self.buckets.size) * cfg.bucket_s)
        goodput = [(i * cfg.bucket_s, float(b / w)) for i, (b, w) in enumerate(zip(self.buckets, width))]
        times = [t for t, _ in self.traj]
        vals = [v for _, v in self.traj]
        for i in range(self.buckets.size):
            j = np.searchsorted(times, min((i + 1) * cfg.bucket_s, H), side="right") - 1
            bucket_vals.append(vals[max(j, 0)])
        prof = cfg.profile
        return Metrics(
            model=prof.name, policy=model.name, mtbf_s=cfg.mtbf, label=model.label,
            ettr=self.useful / H, iterations=self.progress, wall_s=H, useful_s=self.useful, stall_s=self.stall,
            recovery_s=self.recovery, idle_s=self.idle, t_iter=T, tokens_lost=self.tokens_lost,
            checkpoints=model.checkpoints, failures=len(self.trace), events=self.events, goodput=goodput,
            trajectory=self.traj, bucket_values=bucket_vals,
        )


def run_simulation(config: SimConfig, model: PolicyModel | None = None) -> Metrics:
    """Simulate ``config``; ``model`` overrides the policy model built from the profile."""
    if model is None:
        from .profiles import build_policy

        model = build_policy(config.profile, config.policy, mtbf=config.mtbf,
                             t_restart=config.t_restart + config.detection_delay, **config.policy_params)
    return _Loop(config, model).run()
