import csv
import json

import numpy as np
import pytest

from survey_conformal import harness
from survey_conformal.harness import ExperimentConfig, directory_hash, mechanism_study, run_experiment
from survey_conformal.splitter import SplitIntegrityError
from survey_conformal.synthetic import GeneratorConfig, generate

from conftest import tiny_experiment


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_results_row_count_and_files(tmp_path):
    rep = run_experiment(tiny_experiment(), tmp_path)
    rows = read_csv(tmp_path / "results.csv")
    assert len(rows) == 3 * 4 * 2
    for name in ("splits.csv", "splits.json", "paired.csv", "diagnostics.json", "integrity.json", "HASH", "group_results.csv"):
        assert (tmp_path / name).exists()
    assert len(list((tmp_path / "thresholds").rglob("*.json"))) == 3 * 4 * 2
    assert (tmp_path / "HASH").read_text().strip() == rep.content_hash == directory_hash(tmp_path)
    assert rep.integrity["all_ok"] and rep.integrity["reg_mondrian_coherence_violations"] == 0


def test_hash_independent_of_threads(monkeypatch):
    a = run_experiment(tiny_experiment())
    b = run_experiment(tiny_experiment(threads=3))
    monkeypatch.setenv("CONFORMAL_AUDIT_THREADS", "2")
    c = run_experiment(tiny_experiment())
    assert a.content_hash == b.content_hash == c.content_hash


def test_seed_changes_outputs():
    assert run_experiment(tiny_experiment()).content_hash != run_experiment(tiny_experiment(master_seed=1)).content_hash


def test_single_split_flags_paired(tmp_path):
    rep = run_experiment(tiny_experiment(n_splits=1), tmp_path)
    assert rep.paired is None and "R<2" in rep.paired_note
    assert read_csv(tmp_path / "paired.csv") == []
    assert json.loads((tmp_path / "diagnostics.json").read_text())["paired_note"].startswith("paired statistics")


def test_integrity_failure_aborts_with_split_index(monkeypatch):
    real = harness.make_splits

    def corrupted(ds, n, fractions, seed):
        splits = real(ds, n, fractions, seed)
        splits[1].assignment.pop(ds.ids[0])
        return splits

    monkeypatch.setattr(harness, "make_splits", corrupted)
    with pytest.raises(SplitIntegrityError, match="split 1"):
        run_experiment(tiny_experiment())


def test_mean_coverage_near_nominal():
    rep = run_experiment(tiny_experiment(n_splits=20, models=["oracle"]))
    cov = rep.mean("oracle", "STANDARD", "weighted_coverage")
    assert 0.86 < cov < 0.95
    for (key, metric), c in rep.diagnostics.correlations.items():
        assert -1 <= c.pearson_r <= 1 and -1 <= c.spearman_rho <= 1


def test_min_cell_warning():
    rep = run_experiment(tiny_experiment(min_cell_warn=100))
    assert rep.integrity["min_cell_warnings"]


def test_external_model_matches_fixed_matrix(tmp_path):
    cfg = tiny_experiment(models=["oracle"], n_splits=2)
    _, probs, _ = generate(GeneratorConfig.from_dict(cfg["generator"]))
    probs.save(tmp_path / "ext.csv")
    ext = run_experiment({**cfg, "models": [{"tag": "ext", "path": str(tmp_path / "ext.csv")}]})
    base = run_experiment(cfg)
    for a, b in zip(base.results, ext.results):
        assert a.weighted_coverage == b.weighted_coverage and a.weighted_size == b.weighted_size


def test_branch_relabel_collapses_classes(tmp_path):
    branch = {"tag": "three", "relabel": {"1": 1, "2": 1, "3": 2, "4": 3, "5": 3}, "n_classes": 3}
    rep = run_experiment(tiny_experiment(branch=branch, n_splits=2), tmp_path)
    assert all(r.weighted_size <= 3 for r in rep.results)
    ds, _ = harness.load_inputs(ExperimentConfig.from_dict(tiny_experiment(branch=branch)))
    assert ds.n_classes == 3 and set(np.unique(ds.outcomes)) <= {1, 2, 3}


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"n_splits": 2})
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict(tiny_experiment(bogus=1))
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict(tiny_experiment(models=["xgboost"]))


def test_mechanism_zero_informativeness_homogeneous_scores():
    cfg = tiny_experiment(n_splits=4, mechanism={"levels": [0.0], "models": ["oracle", "prior"]})
    rep = mechanism_study(cfg)
    keys = {k for k, _ in rep.diagnostics.correlations}
    assert keys <= {"inf=0/oracle:MONDRIAN", "inf=0/prior:MONDRIAN"} and keys
    for c in rep.diagnostics.correlations.values():
        assert -1 <= c.pearson_r <= 1


def test_mechanism_planted_thin_cell_is_modal_extremum():
    cells = {"thin": 40, "a": 400, "b": 500, "c": 600}
    cfg = {
        "generator": {"cell_sizes": cells, "miscalibration": {"thin": 2.5}, "master_seed": 2},
        "n_splits": 30,
        "mechanism": {"levels": [1.5], "models": ["oracle"]},
    }
    rep = mechanism_study(cfg)
    counts = rep.extrema(1.5, "oracle")
    assert max(counts, key=counts.get) == 1
