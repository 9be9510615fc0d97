import json

import pytest

from smpjump import cli
from smpjump.config import build_config
from smpjump.experiments import RunReport, StageError, format_table, run_experiment, write_report


def test_validate_noise_passes_and_writes_report(tmp_path, capsys):
    code = cli.main(["validate-noise", "--seed", "1", "--paths", "20000", "--out", str(tmp_path)])
    assert code == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["passed"] and summary["n_failed"] == 0
    assert "wall" not in json.dumps(summary)
    assert (tmp_path / "report.txt").exists()
    assert "validate-noise: PASS" in capsys.readouterr().out


def test_config_errors_exit_2(tmp_path):
    assert cli.main(["duality", "--config", str(tmp_path / "missing.cfg")]) == 2
    cfg = tmp_path / "c.cfg"
    cfg.write_text("kind = duality\nseed = 1\n")
    assert cli.main(["optimize", "--config", str(cfg)]) == 2
    assert cli.main(["duality"]) == 2  # no seed


def test_failing_check_and_stage_error_exit_1(tmp_path, monkeypatch):
    def failing(cfg):
        r = RunReport(cfg)
        r.add("forced", 1.0, 0.0, 0.0, False)
        return r

    monkeypatch.setattr(cli, "run_experiment", failing)
    assert cli.main(["duality", "--seed", "1", "--out", str(tmp_path), "--quiet"]) == 1

    def broken(cfg):
        raise StageError("sample", RuntimeError("boom"))

    monkeypatch.setattr(cli, "run_experiment", broken)
    assert cli.main(["duality", "--seed", "1", "--out", str(tmp_path)]) == 1


def test_empty_report_is_valid(tmp_path):
    r = RunReport(build_config({"kind": "duality", "seed": 1}))
    assert r.passed
    write_report(r, str(tmp_path))
    assert json.loads((tmp_path / "summary.json").read_text())["n_checks"] == 0


def test_non_finite_values_are_serialized(tmp_path):
    r = RunReport(build_config({"kind": "duality", "seed": 1}))
    r.add("nan value", float("nan"), 0.0, 1.0, False)
    write_report(r, str(tmp_path))
    assert json.loads((tmp_path / "summary.json").read_text())["checks"][0]["value"] == "nan"


def test_table_keeps_insertion_order():
    r = RunReport(build_config({"kind": "duality", "seed": 1}))
    for name in ("zeta", "alpha", "mid"):
        r.exact(name, 0.0)
    table = format_table(r)
    assert table.index("zeta") < table.index("alpha") < table.index("mid")


def test_reports_are_deterministic(tmp_path):
    cfg = build_config({"kind": "dissect-check", "seed": 5, "paths": 4000})
    for d in ("a", "b"):
        write_report(run_experiment(cfg), str(tmp_path / d))
    assert (tmp_path / "a" / "summary.json").read_bytes() == (tmp_path / "b" / "summary.json").read_bytes()
