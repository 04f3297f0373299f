import csv
import io

import pytest
import yaml

from sparseckpt.cli import main, parse_mtbf
from sparseckpt.config import bundled, load_config
from sparseckpt.core import ConfigError

FAST_SIM = ["--set", "sim.horizon=1800", "--set", "sim.replay_horizon=3600", "--set", "sim.bucket_s=600"]


def _rows(path):
    return list(csv.DictReader(io.StringIO(path.read_text())))


def test_schedule_fig5(tmp_path, capsys):
    assert main(["schedule", "--config", str(bundled("fig5_toy.yaml")), "--out", str(tmp_path)]) == 0
    assert "W_sparse=3 O_Active=2" in capsys.readouterr().out
    rows = _rows(tmp_path / "schedule.csv")
    assert len(rows) == 3
    assert rows[0]["active_ids"].split() == ["L0.E0", "L0.E1"]
    assert (tmp_path / "manifest.yaml").exists()


def test_schedule_dense_fits(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({
        "model": {"layers": 2, "experts_per_layer": 4, "top_k": 2, "expert_params": 1000, "non_expert_params": 1000},
        "schedule": {"t_iter": 1.0, "pcie_bandwidth": 1e12},
    }))
    assert main(["schedule", "--config", str(cfg)]) == 0
    assert "W_sparse=1 " in capsys.readouterr().out


def test_unknown_key_exit_2(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("sim:\n  horizn: 10\n")
    assert main(["simulate", "--config", str(cfg)]) == 2
    assert "unknown key 'sim.horizn'" in capsys.readouterr().err
    assert main(["simulate", "--set", "nope=1"]) == 2
    assert main(["simulate", "--policy", "bogus", *FAST_SIM]) == 2
    assert main(["simulate", "--mtbf", "ten minutes"]) == 2


def test_train_verify_pass_and_fail(tmp_path, capsys):
    args = ["train-verify", "--set", "verify.seeds=2", "--set", "verify.positions=[0,3]"]
    assert main(args + ["--out", str(tmp_path / "ok")]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "localized stage 2: ok" in out
    rows = _rows(tmp_path / "ok" / "verify.csv")
    assert sum(int(r["tokens_lost"]) for r in rows if r["policy"] == "moc") > 0
    assert main(args + ["--set", "verify.corrupt=true", "--out", str(tmp_path / "bad")]) == 1
    bad = _rows(tmp_path / "bad" / "verify.csv")
    assert any(r["status"] == "fail" and r["policy"] == "moetion" for r in bad)


def test_simulate_one_row(tmp_path):
    assert main(["simulate", "--policy", "moetion", "--mtbf", "10M", *FAST_SIM, "--out", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "metrics.csv")
    assert len(rows) == 1 and rows[0]["policy"] == "moetion" and float(rows[0]["mtbf_s"]) == 600.0
    assert list(rows[0])[:9] == ["model", "policy", "mtbf_s", "wsparse_or_interval", "overhead_s_per_iter",
                                 "overhead_pct", "recovery_total_s", "ettr", "tokens_lost"]
    gp = _rows(tmp_path / "goodput.csv")
    assert len(gp) == 3 and set(gp[0]) >= {"bucket_start_s", "samples_per_s"}


def test_sweep_grid(tmp_path):
    mtbfs = ["2H", "1H", "30M", "20M", "10M"]
    argv = ["sweep", *FAST_SIM, "--out", str(tmp_path)] + [a for m in mtbfs for a in ("--mtbf", m)]
    assert main(argv) == 0
    rows = _rows(tmp_path / "metrics.csv")
    assert len(rows) == 20
    assert {(r["policy"], float(r["mtbf_s"])) for r in rows} == {
        (p, parse_mtbf(m)) for p in ("moetion", "gemini", "checkfreq", "moc") for m in mtbfs}


def test_trace_replay_staircase_column(tmp_path):
    assert main(["trace-replay", *FAST_SIM, "--out", str(tmp_path)]) == 0
    gp = _rows(tmp_path / "goodput.csv")
    moc = [float(r["expert_fraction"]) for r in gp if r["policy"] == "moc"]
    assert len(moc) == 6 and moc == sorted(moc)
    assert all(r["expert_fraction"] == "" for r in gp if r["policy"] != "moc")


def test_popularity_csv(tmp_path):
    assert main(["popularity", "--set", "popularity.iterations=4", "--set", "popularity.tokens=512",
                 "--out", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "popularity.csv")
    body = [r for r in rows if r["bucket"] != "summary"]
    assert len(body) == 64
    assert sum(int(r["tokens"]) for r in body) == 4 * 512 * 8
    assert [r["expert_id"] for r in rows if r["bucket"] == "summary"] == ["HHI", "S", "HHI_p", "S_p"]


def test_byte_identical_and_manifest_rerun(tmp_path):
    argv = ["trace-replay", *FAST_SIM, "--seed", "7"]
    assert main(argv + ["--out", str(tmp_path / "a")]) == 0
    assert main(argv + ["--out", str(tmp_path / "b")]) == 0
    for f in ("metrics.csv", "goodput.csv", "manifest.yaml"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    man = tmp_path / "a" / "manifest.yaml"
    assert main(["trace-replay", "--config", str(man), "--out", str(tmp_path / "c")]) == 0
    for f in ("metrics.csv", "goodput.csv", "manifest.yaml"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "c" / f).read_bytes()
    doc = yaml.safe_load(man.read_text())
    assert doc["manifest"]["seed"] == 7 and set(doc["manifest"]["outputs"]) == {"metrics.csv", "goodput.csv"}


def test_parse_mtbf():
    assert parse_mtbf("600") == 600.0
    assert parse_mtbf("10M") == 600.0
    assert parse_mtbf("2h") == 7200.0
    with pytest.raises(ConfigError):
        parse_mtbf("soon")


def test_load_config_overrides():
    cfg = load_config(None, ["sim.horizon=10", "sim.policy_params.moc.budget_frac=0.01"])
    assert cfg["sim"]["horizon"] == 10 and cfg["sim"]["policy_params"] == {"moc": {"budget_frac": 0.01}}
    with pytest.raises(ConfigError):
        load_config(None, ["sim.horizon"])
