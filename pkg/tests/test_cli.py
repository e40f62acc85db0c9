import csv
import json

import pytest

from survey_conformal.cli import main

from conftest import tiny_experiment


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(tiny_experiment()))
    return p


def test_missing_config_exits_1(tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["experiment", "--config", str(tmp_path / "none.json"), "--out", str(out)]) == 1
    assert "usage" in capsys.readouterr().err
    assert json.loads((out / "error.json").read_text())["exit_code"] == 1


def test_unknown_subcommand_and_override(tmp_path, cfg_path):
    assert main(["bogus"]) == 1
    assert main(["experiment", "--config", str(cfg_path), "--out", str(tmp_path / "o"), "--override", "nope=1"]) == 1


def test_experiment_writes_results(tmp_path, cfg_path, capsys):
    out = tmp_path / "exp"
    assert main(["experiment", "--config", str(cfg_path), "--out", str(out)]) == 0
    with open(out / "results.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 3 * 4 * 2
    printed = capsys.readouterr().out
    assert "wtd_coverage" in printed and "REG_MONDRIAN" in printed


def test_override_alpha_reaches_thresholds(tmp_path, cfg_path):
    out = tmp_path / "exp"
    assert main(["experiment", "--config", str(cfg_path), "--out", str(out), "--override", "alpha=0.2", "--quiet"]) == 0
    files = list((out / "thresholds").rglob("*.json"))
    assert files and all(json.loads(f.read_text())["alpha"] == 0.2 for f in files)


def test_seed_flag_and_idempotence(tmp_path, cfg_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["experiment", "--config", str(cfg_path), "--out", str(d), "--seed", "4", "--quiet"]) == 0
    assert (a / "HASH").read_text() == (b / "HASH").read_text()
    assert json.loads((a / "config.json").read_text())["master_seed"] == 4


@pytest.mark.parametrize("cmd", ["validate", "split", "fit", "calibrate", "audit", "mechanism"])
def test_subcommands_run(tmp_path, cfg_path, cmd):
    out = tmp_path / cmd
    args = [cmd, "--config", str(cfg_path), "--out", str(out), "--quiet"]
    if cmd == "mechanism":
        args += ["--override", "mechanism.levels=[1.0]"]
    assert main(args) == 0
    assert any(out.iterdir())
    if cmd == "split":
        assert json.loads((out / "integrity.json").read_text())["all_ok"]


def test_invalid_data_exits_2(tmp_path):
    (tmp_path / "d.csv").write_text("id,y,grp,w\na,1,A,1\nb,2,A,0\n")
    cfg = {"data": {"path": "d.csv", "schema": {"outcome": "y", "group": "grp", "weight": "w", "n_classes": 2}}, "models": ["prior"]}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    out = tmp_path / "o"
    assert main(["validate", "--config", str(tmp_path / "cfg.json"), "--out", str(out)]) == 2
    err = json.loads((out / "error.json").read_text())
    assert err["problems"][0]["row"] == 2


def test_report_single_split(tmp_path, capsys):
    (tmp_path / "cfg.json").write_text(json.dumps(tiny_experiment(n_splits=1)))
    out = tmp_path / "exp"
    assert main(["experiment", "--config", str(tmp_path / "cfg.json"), "--out", str(out), "--quiet"]) == 0
    assert main(["report", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "CI n/a" in text
    assert (out / "report" / "main.csv").exists()


def test_report_groups_sorted_by_standard_coverage(tmp_path):
    (tmp_path / "cfg.json").write_text(json.dumps(tiny_experiment()))
    out = tmp_path / "exp"
    main(["experiment", "--config", str(tmp_path / "cfg.json"), "--out", str(out), "--quiet"])
    main(["report", "--out", str(out), "--quiet"])
    with open(out / "report" / "groups_oracle.csv") as fh:
        rows = list(csv.DictReader(fh))
    std = [float(r["STANDARD"]) for r in rows]
    assert std == sorted(std)


def test_report_warns_on_tampering(tmp_path, capsys):
    (tmp_path / "cfg.json").write_text(json.dumps(tiny_experiment()))
    out = tmp_path / "exp"
    main(["experiment", "--config", str(tmp_path / "cfg.json"), "--out", str(out), "--quiet"])
    with open(out / "results.csv", "a") as fh:
        fh.write("tampered\n")
    assert main(["report", "--out", str(out)]) == 0
    captured = capsys.readouterr()
    assert "hash mismatch" in captured.err
    assert "Main results" in captured.out


def test_report_missing_artifacts(tmp_path, capsys):
    assert main(["report", "--out", str(tmp_path)]) == 1
    assert "summary.csv" in capsys.readouterr().err
