"""``sparseckpt`` command line: schedules, toy-engine verification, simulations and popularity traces.

Exit codes: 0 success, 1 a verification mismatch, 2 a configuration error.
Set ``SPARSECKPT_LOG`` (DEBUG, INFO, WARNING, ...) for log verbosity.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import re
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as C
from .core import ConfigError

log = logging.getLogger("sparseckpt")

COMMANDS = ("schedule", "train-verify", "simulate", "sweep", "trace-replay", "popularity")


class VerificationFailed(Exception):
    pass


def parse_mtbf(text) -> float:
    """Seconds from ``600``, ``600s``, ``10M``/``10m`` or ``2H``/``2h``."""
    if isinstance(text, (int, float)):
        return float(text)
    m = re.fullmatch(r"\s*([0-9]*\.?[0-9]+(?:e[+-]?\d+)?)\s*([smhSMH]?)\s*", str(text))
    if not m:
        raise ConfigError([f"mtbf: cannot parse {text!r}"])
    return float(m.group(1)) * {"": 1, "s": 1, "m": 60, "h": 3600}[m.group(2).lower()]


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# ----------------------------------------------------------------------------- subcommands


def cmd_schedule(cfg: dict, args) -> dict[str, str]:
    from .sim.profiles import _sizes
    from .schedule import plan_schedule

    sc = cfg["schedule"]
    plan = C.precision_from_config(cfg["precision"])
    if cfg["model"] is not None:
        model = C.model_from_config(cfg["model"])
        if sc["t_iter"] is None or sc["pcie_bandwidth"] is None:
            raise ConfigError(["schedule.t_iter and schedule.pcie_bandwidth are required with an explicit model"])
        t_iter, bw = float(sc["t_iter"]), float(sc["pcie_bandwidth"])
        ops = model.operators
    else:
        prof = C.profile_from_config(cfg["profile"], cfg["precision"])
        model, plan = prof.worker, prof.plan
        t_iter = float(sc["t_iter"] or prof.t_iter)
        bw = float(sc["pcie_bandwidth"] or prof.pcie_bw)
        ops = model.operators
    if not (t_iter > 0 and bw > 0):
        raise ConfigError(["schedule.t_iter and schedule.pcie_bandwidth must be > 0"])
    sizes = _sizes(model, plan)
    sched = plan_schedule(ops, sizes, t_iter, bw, sc["ordering"], allow_single=bool(sc["allow_single"]))
    nbytes = sched.slot_bytes(sizes)
    rows = [(k, " ".join(s.active), " ".join(s.compute_only), b, f"{b / bw:.6g}")
            for k, (s, b) in enumerate(zip(sched.slots, nbytes))]
    print(f"W_sparse={sched.window} O_Active={sched.o_active} operators={len(ops)} "
          f"budget_bytes={t_iter * bw:.6g}")
    for k, a, c, b, t in rows:
        print(f"  slot {k}: active=[{a}] compute_only=[{c}] bytes={b} seconds={t}")
    return {"schedule.csv": _csv(rows, ["slot", "active_ids", "compute_only_ids", "slot_bytes", "slot_seconds"])}


def cmd_train_verify(cfg: dict, args) -> dict[str, str]:
    from .toytrain.engine import ToyConfig
    from .verify import VERIFY_POLICIES, train_verify, verify_localized

    v = cfg["verify"]
    try:
        base = ToyConfig(**v["toy"])
    except TypeError as exc:
        raise ConfigError([f"verify.toy: {exc}"]) from None
    pols = list(v["policies"])
    bad = [p for p in pols if p not in VERIFY_POLICIES + ("localized",)]
    if bad:
        raise ConfigError([f"verify.policies: unknown policy {p!r}" for p in bad])
    seeds = range(cfg["seed"], cfg["seed"] + int(v["seeds"]))
    positions = tuple(int(p) for p in v["positions"])
    res = train_verify(seeds, positions, [p for p in pols if p != "localized"], int(v["window"]), bool(v["corrupt"]),
                       base)
    rows = [(r.seed, r.policy, r.position, r.status, r.tokens_lost, r.detail) for r in res]
    # matrix: one line per (seed, policy), one column per position
    cols = [p for p in VERIFY_POLICIES if p in pols]
    print("seed  policy   " + " ".join(f"{p:>6}" for p in positions))
    mark = {"pass": "ok", "lossy": "lossy", "fail": "FAIL"}
    for s in seeds:
        for pol in cols:
            cells = {r.position: r.status for r in res if r.seed == s and r.policy == pol}
            print(f"{s:>4}  {pol:<8} " + " ".join(f"{mark[cells[p]]:>6}" for p in positions))
    failed = [r for r in res if not r.ok]
    if "localized" in pols:
        loc = verify_localized(replace(base, pp_stages=3, layers=max(3, base.layers), replicas=max(2, base.replicas)),
                               window=int(v["window"]))
        for st in loc:
            ok = st.recovered_ok and st.others_unchanged
            rows.append((cfg["seed"], "localized", st.stage, "pass" if ok else "fail", 0,
                         "" if ok else "stage state or neighbour digests differ"))
            print(f"localized stage {st.stage}: {'ok' if ok else 'FAIL'}")
            if not ok:
                failed.append(st)
    lost = sum(r.tokens_lost for r in res)
    print(f"{len(rows) - len(failed)}/{len(rows)} cases ok, moc tokens_lost={lost}")
    out = {"verify.csv": _csv(rows, ["seed", "policy", "position", "status", "tokens_lost", "detail"])}
    if failed:
        raise VerificationFailed(out)
    return out


def _sim_common(cfg: dict):
    s = cfg["sim"]
    prof = C.profile_from_config(cfg["profile"], cfg["precision"])
    seeds = [cfg["seed"] + i for i in range(int(s["seeds"]))]
    return s, prof, seeds


def _trace(s: dict, nodes: int | None):
    from .sim.failures import read_trace

    path = s["trace"]
    p = Path(path)
    if not p.exists():
        p = C.bundled(path)
    if not p.exists():
        raise ConfigError([f"sim.trace: {path} not found"])
    try:
        return read_trace(p, nodes)
    except ValueError as exc:
        raise ConfigError([f"sim.trace: {exc}"]) from None


def cmd_simulate(cfg: dict, args) -> dict[str, str]:
    from .sim.failures import Poisson
    from .sim.simulator import SimConfig, run_simulation
    from .sim.sweep import Row, goodput_csv, merge, metrics_csv

    s, prof, seeds = _sim_common(cfg)
    pol = s["policies"][0]
    proc = _trace(s, prof.nodes) if s["trace"] else Poisson(parse_mtbf(s["mtbf"]))
    runs = [run_simulation(SimConfig(prof, pol, proc, float(s["horizon"]), float(s["t_restart"]),
                                     float(s["detection_delay"]), sd, dict(s["policy_params"].get(pol, {})),
                                     float(s["bucket_s"]))) for sd in seeds]
    row = Row(prof.name, pol, runs[0].mtbf_s, merge(runs), runs)
    out = {"metrics.csv": metrics_csv([row]), "goodput.csv": goodput_csv({pol: runs[0]})}
    sys.stdout.write(out["metrics.csv"])
    return out


def cmd_sweep(cfg: dict, args) -> dict[str, str]:
    from .sim.sweep import metrics_csv, sweep

    s, prof, seeds = _sim_common(cfg)
    rows = sweep([prof], [parse_mtbf(m) for m in s["mtbfs"]], s["policies"], seeds, float(s["horizon"]),
                 float(s["t_restart"]), float(s["detection_delay"]), s["policy_params"], int(s["workers"]))
    out = {"metrics.csv": metrics_csv(rows)}
    sys.stdout.write(out["metrics.csv"])
    errs = [r for r in rows if r.error]
    for r in errs:
        log.error("%s/%s/%s failed: %s", r.model, r.policy, r.mtbf_s, r.error)
    return out


def cmd_trace_replay(cfg: dict, args) -> dict[str, str]:
    from .sim.sweep import goodput_csv, metrics_csv, trace_replay

    s, prof, seeds = _sim_common(cfg)
    trace = _trace({**s, "trace": s["trace"] or "trace_24_events_6h.csv"}, prof.nodes)
    res = trace_replay(prof, trace, s["policies"], float(s["replay_horizon"]), float(s["t_restart"]),
                       float(s["detection_delay"]), seeds[0], s["policy_params"], float(s["bucket_s"]))
    out = {"metrics.csv": metrics_csv(list(res.values())), "goodput.csv": goodput_csv(res)}
    for pol, m in res.items():
        print(f"{pol:<10} ettr={m.ettr:.4f} mean_goodput={np.mean([g for _, g in m.goodput]):.2f} samples/s "
              f"failures={m.failures}")
    return out


def cmd_popularity(cfg: dict, args) -> dict[str, str]:
    from .workload import alpha_for_skew, gen_routing_trace, hhi, sample_popularity, skewness

    p = cfg["popularity"]
    e, k, n = int(p["experts"]), int(p["top_k"]), int(p["iterations"])
    try:
        alpha = alpha_for_skew(float(p["skewness"]), e)
        rng = np.random.default_rng([cfg["seed"], 11])  # popularity substream
        vec = sample_popularity(alpha, e, rng)
        tr = gen_routing_trace(e, k, vec, n, int(p["tokens"]), rng, layers=int(p["layers"]))
    except ValueError as exc:
        raise ConfigError([f"popularity: {exc}"]) from None
    width = int(p["bucket"]) or n
    rows = []
    for b0 in range(0, n, width):
        tot = tr.counts[b0 : b0 + width].sum(axis=(0, 1))
        share = tot / tot.sum()
        rows += [(b0, j, int(tot[j]), f"{share[j]:.6g}") for j in range(e)]
    tot = tr.counts.sum(axis=(0, 1))
    share = tot / tot.sum()
    # realised token shares first, then the sampled popularity vector behind them
    rows.append(("summary", "HHI", "", f"{hhi(share):.6g}"))
    rows.append(("summary", "S", "", f"{skewness(share):.6g}"))
    rows.append(("summary", "HHI_p", "", f"{hhi(vec):.6g}"))
    rows.append(("summary", "S_p", "", f"{skewness(vec):.6g}"))
    print(f"E={e} top_k={k} target S={p['skewness']} realised S={skewness(share):.4f} HHI={hhi(share):.4f}")
    return {"popularity.csv": _csv(rows, ["bucket", "expert_id", "tokens", "share"])}


HANDLERS = {
    "schedule": cmd_schedule,
    "train-verify": cmd_train_verify,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "trace-replay": cmd_trace_replay,
    "popularity": cmd_popularity,
}


# ----------------------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sparseckpt", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML config (or a manifest.yaml from an earlier run)")
        p.add_argument("--seed", type=int, help="top-level seed; every random stream derives from it")
        p.add_argument("--out", help="directory for CSV outputs and manifest.yaml")
        p.add_argument("--policy", action="append", help="policy name (repeatable)")
        p.add_argument("--mtbf", action="append", help="MTBF, e.g. 600, 10M or 2H (repeatable for sweep)")
        p.add_argument("--trace", help="failure trace CSV (t_seconds,node_id,kind)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key, e.g. sim.horizon=3600")
    return ap


def resolve(args) -> dict:
    over = list(args.overrides)
    cfg = C.load_config(args.config, over)
    if args.seed is not None:
        cfg["seed"] = int(args.seed)
    if args.policy:
        if args.command == "train-verify":
            cfg["verify"]["policies"] = list(args.policy)
        else:
            cfg["sim"]["policies"] = list(args.policy)
    if args.mtbf:
        cfg["sim"]["mtbfs"] = [parse_mtbf(m) for m in args.mtbf]
        cfg["sim"]["mtbf"] = parse_mtbf(args.mtbf[0])
    if args.trace:
        cfg["sim"]["trace"] = args.trace
    return cfg


def write_outputs(outdir, command: str, cfg: dict, files: dict[str, str]) -> None:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    for name, text in sorted(files.items()):
        (out / name).write_text(text)
    man = C.Manifest(command, int(cfg["seed"]), cfg, outputs={n: C.digest(t) for n, t in sorted(files.items())})
    (out / "manifest.yaml").write_text(man.to_yaml())


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("SPARSECKPT_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args)
        files = HANDLERS[args.command](cfg, args)
        code = 0
    except ConfigError as exc:
        for v in exc.violations:
            print(f"config error: {v}", file=sys.stderr)
        return 2
    except VerificationFailed as exc:
        files, code = exc.args[0], 1
        print("verification failed", file=sys.stderr)
    if args.out:
        write_outputs(args.out, args.command, cfg, files)
    return code


if __name__ == "__main__":
    sys.exit(main())
