import csv
import json
import shutil
import subprocess
import sys

import pytest

from conftest import ROOT
from groundsim.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from groundsim.metrics import METRICS, aggregate, write_report
from groundsim.oracle import CREDENTIAL_ENV
from groundsim.scenario import builtin_profile

TINY = str(ROOT / "configs" / "tiny.ini")


def listing(out):
    return sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file())


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


def test_usage_errors(tmp_path, capsys):
    assert main([]) == EXIT_USAGE
    assert main(["train-sim", "--setting", "V9"]) == EXIT_USAGE
    assert main(["transfer", "--mode", "grounded"]) == EXIT_USAGE
    assert main(["transfer", "--seeds", "0"]) == EXIT_USAGE
    assert main(["oracle", "--weather", "sunny", "--road", "normal", "--count", "-1"]) == EXIT_USAGE
    assert main(["--version"]) == EXIT_OK


def test_bad_config_exit_code(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[trainer]\nsteps = -5\n")
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_USAGE
    assert main(["simulate", "--config", str(tmp_path / "missing.ini"), "--out", str(tmp_path / "o")]) \
        == EXIT_RUNTIME


def test_oracle_command(capsys):
    assert main(["oracle", "--weather", "snowy", "--road", "normal", "--count", "7", "--show-prompt"]) == EXIT_OK
    out = capsys.readouterr().out.splitlines()
    assert "In snowy day, on a normal road with 7 vehicles." in out
    assert json.loads(out[-1]) == {"ac": 0.45, "ad": 1.5, "aed": 2.0, "adl": 0.55}


def test_train_sim_outputs_and_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train-sim", "--config", TINY, "--seed-list", "4", "--out", str(a)]) == EXIT_OK
    assert main(["train-sim", "--config", TINY, "--seed-list", "4", "--out", str(b)]) == EXIT_OK
    rows = list(csv.DictReader((a / "curve_seed4.csv").open()))
    assert len(rows) == 2 and [r["episode"] for r in rows] == ["0", "1"]
    assert list(rows[0]) == ["episode", "reward_mean", "att", "tp", "epsilon"]
    assert float(rows[1]["epsilon"]) < float(rows[0]["epsilon"])
    for name in ("policy_seed4.bin", "curve_seed4.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert sorted(manifest(a)["files"]) == listing(a)


def test_train_sim_resume_matches_uninterrupted(tmp_path):
    whole, part = tmp_path / "whole", tmp_path / "part"
    cfg4 = tmp_path / "four.ini"
    cfg4.write_text(open(TINY).read().replace("episodes = 2", "episodes = 4"))
    assert main(["train-sim", "--config", str(cfg4), "--out", str(whole)]) == EXIT_OK
    assert main(["train-sim", "--config", TINY, "--out", str(part)]) == EXIT_OK
    assert main(["train-sim", "--config", str(cfg4), "--out", str(part), "--resume"]) == EXIT_OK
    assert (whole / "curve_seed0.csv").read_text().splitlines()[:3] == \
        (part / "curve_seed0.csv").read_text().splitlines()[:3]
    assert len((part / "curve_seed0.csv").read_text().splitlines()) == 5


def test_transfer_manifest_and_report(tmp_path):
    out = tmp_path / "t"
    assert main(["transfer", "--config", TINY, "--mode", "prompt", "--seed-list", "1,2", "--out", str(out),
                 "--log-episodes", "--save-datasets"]) == EXIT_OK
    assert sorted(manifest(out)["files"]) == listing(out)
    data = json.loads((out / "report.json").read_text())
    assert data[0]["method"] == "prompt_gat" and data[0]["seeds"] == [1, 2]
    assert all(row["oracle_calls"] > 0 for row in data[0]["per_seed"])
    assert (out / "report.csv").read_text().count("\n") == 2


def test_transfer_from_checkpoint(tmp_path):
    ck = tmp_path / "ck"
    assert main(["train-sim", "--config", TINY, "--out", str(ck)]) == EXIT_OK
    out = tmp_path / "t"
    assert main(["transfer", "--config", TINY, "--checkpoint", str(ck / "policy_seed{seed}.bin"),
                 "--out", str(out)]) == EXIT_OK
    assert main(["transfer", "--config", TINY, "--checkpoint", str(tmp_path / "nope.bin"),
                 "--out", str(out)]) == EXIT_USAGE
    assert main(["transfer", "--config", TINY, "--seed-list", "5",
                 "--checkpoint", str(ck / "policy_seed{seed}.bin"), "--out", str(out)]) == EXIT_RUNTIME


def test_transfer_remote_without_credential(tmp_path, monkeypatch):
    monkeypatch.delenv(CREDENTIAL_ENV, raising=False)
    cfg = tmp_path / "remote.ini"
    cfg.write_text(open(TINY).read() + "\n[oracle]\nbackend = remote\nendpoint = http://127.0.0.1:9/v1\n")
    out = tmp_path / "r"
    assert main(["transfer", "--config", str(cfg), "--mode", "prompt", "--out", str(out)]) == EXIT_USAGE
    assert not out.exists()


def test_simulate(tmp_path):
    out = tmp_path / "s"
    assert main(["simulate", "--config", TINY, "--seeds", "2", "--setting", "V3", "--out", str(out)]) == EXIT_OK
    rep = json.loads((out / "report.json").read_text())[0]
    assert rep["method"] == "fixed_time" and rep["setting"] == "V3" and rep["seeds"] == [0, 1]


def _fake(path, method, deltas):
    reps = []
    for setting, d in deltas.items():
        runs = [(s, {m: 100.0 for m in METRICS}, {m: 100.0 + d + s for m in METRICS}) for s in range(3)]
        reps.append(aggregate(method, setting, runs, [{"forward_mse": 1.0 + d * s} for s in range(3)]))
    write_report(reps, path)
    return path


def test_compare_two_settings(tmp_path):
    a = _fake(tmp_path / "a.csv", "direct", {"V1": 40.0, "V4": 200.0})
    b = _fake(tmp_path / "b.csv", "prompt_gat", {"V1": 36.0, "V4": 180.0})
    out = tmp_path / "c"
    assert main(["compare", str(a.with_suffix(".json")), str(b.with_suffix(".json")), "--out", str(out)]) == EXIT_OK
    rows = list(csv.DictReader((out / "improvement.csv").open()))
    att = {r["setting"]: r for r in rows if r["metric"] == "att"}
    assert float(att["V1"]["raw"]) == pytest.approx(4.0) and float(att["V4"]["raw"]) == pytest.approx(20.0)
    assert float(att["V1"]["normalized"]) == 0.0 and float(att["V4"]["normalized"]) == 1.0
    corr = list(csv.DictReader((out / "correlation.csv").open()))
    assert corr[0]["x"] == "accuracy"
    assert sorted(manifest(out)["files"]) == listing(out)


def test_compare_single_setting_flagged(tmp_path):
    a = _fake(tmp_path / "a.csv", "direct", {"V1": 47.69})
    b = _fake(tmp_path / "b.csv", "prompt_gat", {"V1": 43.74})
    out = tmp_path / "c"
    assert main(["compare", str(a.with_suffix(".json")), str(b.with_suffix(".json")), "--out", str(out)]) == EXIT_OK
    row = next(csv.DictReader((out / "improvement.csv").open()))
    assert float(row["raw"]) == pytest.approx(3.95) and row["normalized"] == ""
    assert "at least 2 settings" in (out / "flags.txt").read_text()


def test_compare_identical_reports_flagged(tmp_path):
    a = _fake(tmp_path / "a.csv", "direct", {"V1": 10.0, "V2": 20.0})
    out = tmp_path / "c"
    assert main(["compare", str(a.with_suffix(".json")), str(a.with_suffix(".json")), "--out", str(out)]) == EXIT_OK
    assert "zero variance" in (out / "flags.txt").read_text()
    assert all(float(r["raw"]) == 0.0 for r in csv.DictReader((out / "improvement.csv").open()))


def test_compare_mismatch(tmp_path):
    a = _fake(tmp_path / "a.csv", "direct", {"V1": 1.0})
    b = _fake(tmp_path / "b.csv", "prompt_gat", {"V2": 1.0})
    assert main(["compare", str(a.with_suffix(".json")), str(b.with_suffix(".json")),
                 "--out", str(tmp_path / "c")]) == EXIT_USAGE
    assert main(["compare", str(a.with_suffix(".json")), "--out", str(tmp_path / "c")]) == EXIT_USAGE


@pytest.mark.skipif(shutil.which("groundsim") is None, reason="console script not installed")
def test_console_script(tmp_path):
    res = subprocess.run(["groundsim", "oracle", "--weather", "rainy", "--road", "normal", "--count", "0"],
                         capture_output=True, text=True, check=True)
    assert json.loads(res.stdout)["adl"] == builtin_profile("V3").startup_delay
    res = subprocess.run([sys.executable, "-m", "groundsim", "train-sim", "--setting", "V9"], capture_output=True)
    assert res.returncode == 2


def test_oracle_paths_relative_to_config(tmp_path, monkeypatch, capsys):
    from groundsim.oracle import DynamicsEstimate, Weather, RoadType, default_rule_table, write_rule_table
    sub = tmp_path / "cfgdir"
    sub.mkdir()
    table = default_rule_table()
    table[(Weather.SNOWY, RoadType.NORMAL)] = DynamicsEstimate(0.4, 1.0, 1.5, 1.0)
    write_rule_table(table, sub / "table.csv")
    (sub / "c.ini").write_text("[oracle]\ntable = table.csv\n")
    monkeypatch.chdir(tmp_path)
    assert main(["oracle", "--config", "cfgdir/c.ini", "--weather", "snowy", "--road", "normal",
                 "--count", "0"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["ac"] == 0.4
