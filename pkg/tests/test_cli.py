import json
import os
import subprocess
import sys

import pytest

from smpv.cli import RunConfig, emit_report, main, run
from smpv.errors import ConfigError, SchemaMismatch
from smpv.scenarios import get_scenario, save_problem


def cli(*args):
    return main([str(a) for a in args])


def test_null_all_conditions_hold(tmp_path, capsys):
    code = cli("check", "--scenario", "NULL", "--seed", 1, "--paths", 200, "--steps", 32, "--conditions", "all",
               "--out", tmp_path)
    assert code == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["verdict"] == "HOLDS"
    for r in doc["reports"]:
        assert r["verdict"] == "HOLDS"
        assert r.get("value", 0.0) == 0.0
    assert (tmp_path / "summary.json").exists() and (tmp_path / "maximum_principle.csv").exists()


def test_violator_exit_code(capsys):
    assert cli("check", "--scenario", "VIOLATOR", "--seed", 1, "--paths", 200, "--steps", 32) == 2
    doc = json.loads(capsys.readouterr().out)
    assert doc["reports"][0]["value"] == pytest.approx(1.0)


def test_inconclusive_exit_code(tmp_path, capsys):
    # the problem file carries no closed-form Malliavin derivative of the random S
    sc = get_scenario("RANDOM-ADJ")
    save_problem(tmp_path / "p.json", sc.spec, sc.control)
    code = cli("check", "--problem", tmp_path / "p.json", "--seed", 1, "--paths", 2000, "--steps", 32,
               "--conditions", "pointwise_convex", "--v-grid", "1")
    assert code == 3
    assert cli("check", "--scenario", "RANDOM-ADJ", "--seed", 1, "--paths", 2000, "--steps", 32,
               "--conditions", "pointwise_convex", "--v-grid", "1") == 0


@pytest.mark.parametrize("args", [
    ("check", "--scenario", "NULL", "--paths", 200, "--steps", 32),
    ("check", "--scenario", "NULL", "--seed", 1, "--paths", 50, "--steps", 32),
    ("check", "--scenario", "NULL", "--seed", 1, "--paths", 200, "--steps", 8),
    ("check", "--scenario", "NOPE", "--seed", 1, "--paths", 200, "--steps", 32),
    ("check", "--seed", 1, "--paths", 200, "--steps", 32),
    ("check", "--scenario", "NULL", "--seed", 1, "--paths", 200, "--steps", 32, "--conditions", "bogus"),
    ("sweep", "--scenario", "NULL", "--seed", 1, "--paths", 200, "--steps", 32),
])
def test_errors_exit_one(args, capsys):
    assert cli(*args) == 1
    err = json.loads(capsys.readouterr().err)
    assert set(err) == {"error", "message"}


def test_config_validation_codes():
    with pytest.raises(ConfigError) as e:
        run(RunConfig("check", scenario="NULL"))
    assert e.value.code == "config_error"


def test_other_subcommands(tmp_path, capsys):
    assert cli("validate", "--scenario", "GBM", "--seed", 0) == 0
    assert json.loads(capsys.readouterr().out)["valid"]
    assert cli("simulate", "--scenario", "GBM", "--seed", 0, "--paths", 100, "--steps", 16, "--out", tmp_path) == 0
    capsys.readouterr()
    assert (tmp_path / "state.csv").exists()
    assert cli("adjoints", "--scenario", "SING-DET", "--seed", 0, "--paths", 100, "--steps", 16) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["second"]["mean_P"][0] == [pytest.approx(-2.0)]
    assert len(doc["chain"]) == 4


def test_sweeps(capsys):
    assert cli("sweep", "--scenario", "SING-DET", "--seed", 0, "--paths", 100, "--steps", 640, "--kind", "epsilon",
               "--spike", 1) == 0
    r = json.loads(capsys.readouterr().out)["reports"][0]
    assert r["condition"] == "variational_equality" and r["exponent"] == "inf"
    assert r["lhs_over_eps2"][-1] == pytest.approx(0.5, rel=0.05)
    code = cli("sweep", "--scenario", "RANDOM-ADJ", "--seed", 0, "--paths", 4000, "--steps", 320, "--v-grid", 1)
    r = json.loads(capsys.readouterr().out)["reports"][0]
    assert r["condition"] == "theta_scaling" and r["value"] == pytest.approx(1.5, abs=0.15) and code == 0


def test_emit_report_contract():
    rep = {"schema": "smpv-report-1", "condition": "x", "verdict": "HOLDS", "provenance": {"seed": 1}}
    s = emit_report([rep])
    assert s["reports"] == [rep] and s["verdict"] == "HOLDS" and s["exit_code"] == 0
    assert emit_report([rep]) == s
    with pytest.raises(SchemaMismatch):
        emit_report([rep, dict(rep, schema="smpv-report-0")])
    two = emit_report([rep, dict(rep, verdict="INCONCLUSIVE")])
    assert two["exit_code"] == 3


def test_report_merge(tmp_path, capsys):
    out = tmp_path / "a"
    cli("check", "--scenario", "VIOLATOR", "--seed", 1, "--paths", 200, "--steps", 32, "--out", out)
    cli("check", "--scenario", "NULL", "--seed", 1, "--paths", 200, "--steps", 32, "--out", tmp_path / "b")
    capsys.readouterr()
    assert cli("report", out / "summary.json", tmp_path / "b" / "summary.json", "--out", tmp_path / "m") == 2
    merged = json.loads((tmp_path / "m" / "summary.json").read_text())
    assert len(merged["reports"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"schema": "other", "verdict": "HOLDS"}))
    assert cli("report", bad) == 1


def _run_cli(out, threads):
    env = dict(os.environ, SMPV_THREADS=str(threads))
    subprocess.run([sys.executable, "-m", "smpv.cli", "check", "--scenario", "MIXED", "--seed", "7", "--paths", "400",
                    "--steps", "32", "--conditions", "maximum_principle,classical_singular,integral_condition",
                    "--out", str(out)], env=env, check=False, capture_output=True)
    return (out / "summary.json").read_bytes()


def test_byte_identical_across_runs_and_threads(tmp_path):
    a = _run_cli(tmp_path / "a", 1)
    b = _run_cli(tmp_path / "b", 1)
    c = _run_cli(tmp_path / "c", 4)
    assert a == b == c and len(a) > 1000
