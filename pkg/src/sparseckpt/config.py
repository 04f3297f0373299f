"""Experiment configuration: YAML files, ``--set key=value`` overrides and run manifests."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import yaml

from .core import PRECISION_PLANS, ConfigError, ModelSpec, PrecisionPlan

VERSION = "0.1.0"

# Leaves whose value is a free-form mapping are listed in FREE; everything
# else must appear here or the file is rejected.
DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "model": None,  # explicit operator layout for `schedule` (see model_from_config)
    "precision": "fp16/fp32/fp32+fp32",
    "schedule": {"t_iter": None, "pcie_bandwidth": None, "ordering": "hard", "allow_single": False},
    "profile": "deepseek",  # calibrated model key, profile mapping, or path to a profile YAML
    "sim": {
        "horizon": 12 * 3600.0,
        "t_restart": 30.0,
        "detection_delay": 5.0,
        "mtbf": 600.0,
        "mtbfs": [7200.0, 3600.0, 1800.0, 1200.0, 600.0],
        "policies": ["moetion", "gemini", "checkfreq", "moc"],
        "seeds": 1,
        "trace": None,
        "replay_horizon": 6 * 3600.0,
        "bucket_s": 60.0,
        "workers": 1,
        "policy_params": {},
    },
    "verify": {
        "seeds": 20,
        "positions": [0, 3, 6, 9, 12, 15],
        "policies": ["moetion", "dense", "moc", "localized"],
        "window": 3,
        "corrupt": False,
        "toy": {},
    },
    "popularity": {"experts": 64, "top_k": 8, "skewness": 0.5, "iterations": 20, "tokens": 4096, "layers": 1,
                   "bucket": 0},  # iterations per CSV bucket; 0 -> one bucket
}
FREE = {"model", "profile", "sim.policy_params", "verify.toy"}


def bundled(name: str) -> Path:
    """Path of a file shipped in ``sparseckpt/data``."""
    return Path(str(resources.files("sparseckpt") / "data" / name))


def _check(d: Mapping, ref: Mapping, prefix: str, errors: list[str]) -> None:
    for k, v in d.items():
        key = f"{prefix}{k}"
        if k not in ref:
            errors.append(f"unknown key {key!r}")
        elif key in FREE:
            continue
        elif isinstance(ref[k], dict):
            if not isinstance(v, Mapping):
                errors.append(f"{key} must be a mapping")
            else:
                _check(v, ref[k], key + ".", errors)


def _merge(base: dict, over: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict) and k not in ("model", "profile"):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError([f"override {text!r} is not key=value"])
    k, v = text.split("=", 1)
    return k.strip().split("."), yaml.safe_load(v)


def apply_overrides(cfg: dict, overrides) -> dict:
    cfg = copy.deepcopy(cfg)
    for text in overrides or ():
        path, value = parse_override(text)
        cur, ref = cfg, DEFAULTS
        for n, part in enumerate(path[:-1]):
            dotted = ".".join(path[: n + 1])
            if dotted in FREE:
                ref = None
            elif ref is not None:
                if part not in ref or not isinstance(ref[part], dict):
                    raise ConfigError([f"unknown key {'.'.join(path)!r}"])
                ref = ref[part]
            if not isinstance(cur.get(part), dict):
                cur[part] = {}
            cur = cur[part]
        if ref is not None and path[-1] not in ref:
            raise ConfigError([f"unknown key {'.'.join(path)!r}"])
        cur[path[-1]] = value
    return cfg


def load_config(path=None, overrides=()) -> dict:
    """Defaults, then the YAML file at ``path``, then ``overrides``; unknown keys raise ConfigError."""
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError([f"config file {path} not found"])
        try:
            raw = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError([f"config file {path}: {exc}"]) from None
        if not isinstance(raw, Mapping):
            raise ConfigError([f"config file {path}: top level must be a mapping"])
        if "manifest" in raw and "config" in raw:
            raw = raw["config"]  # re-run from a manifest
    errors: list[str] = []
    _check(raw, DEFAULTS, "", errors)
    if errors:
        raise ConfigError(errors)
    cfg = apply_overrides(_merge(DEFAULTS, raw), overrides)
    return cfg


def precision_from_config(v) -> PrecisionPlan:
    if isinstance(v, str):
        if v not in PRECISION_PLANS:
            raise ConfigError([f"precision: unknown preset {v!r}"])
        return PRECISION_PLANS[v]
    if isinstance(v, Mapping):
        return PrecisionPlan.from_dict(v)
    raise ConfigError(["precision must be a preset name or a mapping"])


MODEL_KEYS = {"name", "layers", "experts_per_layer", "top_k", "expert_params", "non_expert_params", "gate_params",
              "shared_experts"}


def model_from_config(d: Mapping) -> ModelSpec:
    bad = sorted(set(d) - MODEL_KEYS)
    if bad:
        raise ConfigError([f"unknown key 'model.{k}'" for k in bad])
    missing = [k for k in ("layers", "experts_per_layer", "top_k", "expert_params", "non_expert_params") if k not in d]
    if missing:
        raise ConfigError([f"model.{k} is required" for k in missing])
    return ModelSpec.build(str(d.get("name", "model")), int(d["layers"]), int(d["experts_per_layer"]), int(d["top_k"]),
                           int(d["expert_params"]), int(d["non_expert_params"]), d.get("gate_params"),
                           int(d.get("shared_experts", 0)))


def profile_from_config(v, precision=None):
    from .sim.profiles import SHAPES, SimProfile, calibrated

    plan = precision_from_config(precision) if precision is not None else None
    if isinstance(v, str) and v in SHAPES:
        return calibrated(v, plan) if plan is not None else calibrated(v)
    if isinstance(v, str):
        p = Path(v)
        if not p.exists():
            p = bundled(v)
        if not p.exists():
            raise ConfigError([f"profile: {v!r} is neither a calibrated model ({', '.join(SHAPES)}) nor a file"])
        v = yaml.safe_load(p.read_text())
    if isinstance(v, Mapping):
        prof = SimProfile.from_dict(v)
        return prof.with_plan(plan) if plan is not None and precision != "fp16/fp32/fp32+fp32" else prof
    raise ConfigError(["profile must be a model key, a file path or a mapping"])


@dataclass
class Manifest:
    command: str
    seed: int
    config: dict
    version: str = VERSION
    outputs: dict = field(default_factory=dict)  # file name -> blake2b digest

    def to_yaml(self) -> str:
        return yaml.safe_dump({"manifest": {"command": self.command, "seed": self.seed, "version": self.version,
                                            "outputs": self.outputs}, "config": self.config}, sort_keys=True)


def digest(text: str | bytes) -> str:
    b = text.encode() if isinstance(text, str) else text
    return hashlib.blake2b(b, digest_size=16).hexdigest()


def canonical(cfg: Mapping) -> str:
    return json.dumps(cfg, sort_keys=True, default=str)
