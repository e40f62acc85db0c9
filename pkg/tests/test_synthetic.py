import json

import numpy as np
import pytest

from survey_conformal.data import cross_tabulate
from survey_conformal.synthetic import (
    GeneratorConfig,
    distort,
    exchangeable_stream,
    generate,
    load_generator_config,
    po_probs,
)


def test_zero_informativeness_rows_equal_planted_distribution():
    cfg = GeneratorConfig(cell_sizes={"A": 50, "B": 70}, informativeness=0.0, group_shift={"B": 0.8})
    ds, probs, manifest = generate(cfg)
    for g, label in enumerate(cfg.group_labels, start=1):
        rows = probs.values[ds.groups == g]
        assert np.allclose(rows, manifest.class_distribution[label], atol=1e-15)


def test_identity_distortion():
    p = np.random.default_rng(0).dirichlet(np.ones(5), 20)
    assert distort(p, 1.0) is p
    cfg = GeneratorConfig(cell_sizes={"A": 200}, master_seed=1)
    ds, probs, _ = generate(cfg)
    z = ds.covariates @ cfg.direction()
    assert np.allclose(probs.values, po_probs(cfg.theta("A"), cfg.slope("A") * z), atol=1e-15)


def test_planted_cell_sizes():
    ds, _, manifest = generate(GeneratorConfig(cell_sizes={"thin": 32, "mid": 45, "big": 355}))
    t = cross_tabulate(ds)
    assert dict(zip(t.names, t.counts)) == {"thin": 32, "mid": 45, "big": 355}
    assert manifest.config["cell_sizes"] == {"thin": 32, "mid": 45, "big": 355}


def test_generation_deterministic():
    cfg = GeneratorConfig(cell_sizes={"A": 100, "B": 30}, master_seed=7, weight_law={"kind": "lognormal"})
    a, pa, _ = generate(cfg)
    b, pb, _ = generate(cfg)
    assert a.same_records(b) and np.array_equal(pa.values, pb.values) and np.array_equal(a.weights, b.weights)


def test_streams_repeatable():
    cfg = GeneratorConfig(cell_sizes={"A": 20, "B": 10}, master_seed=3)
    s1 = [(d.dataset.outcomes.tolist(), d.cal_ids) for d in exchangeable_stream(cfg, 3, n_cal=40, n_test=30)]
    s2 = [(d.dataset.outcomes.tolist(), d.cal_ids) for d in exchangeable_stream(cfg, 3, n_cal=40, n_test=30)]
    assert s1 == s2


def test_stratified_stream_has_exact_cal_cells():
    cfg = GeneratorConfig(cell_sizes={"A": 32, "B": 64}, master_seed=3)
    for d in exchangeable_stream(cfg, 3, n_test=50, cal_sampling="stratified"):
        g = d.dataset.groups[d.dataset.rows(d.cal_ids)]
        assert np.bincount(g, minlength=3)[1:].tolist() == [32, 64]
        assert len(d.test_ids) == 50


def test_empirical_frequencies_match_planted():
    cfg = GeneratorConfig(cell_sizes={"A": 100_000}, informativeness=1.3, group_shift={"A": 0.4}, master_seed=4)
    ds, _, manifest = generate(cfg)
    truth = np.array(manifest.class_distribution["A"])
    freq = np.bincount(ds.outcomes - 1, minlength=5) / ds.n
    se = np.sqrt(truth * (1 - truth) / ds.n)
    assert np.all(np.abs(freq - truth) < 3 * se)


def test_config_validation_and_loading(tmp_path):
    with pytest.raises(ValueError):
        GeneratorConfig(cell_sizes={"A": 10}, miscalibration={"Z": 1.2})
    with pytest.raises(ValueError):
        GeneratorConfig(cell_sizes={"A": 10}, cutpoints=(0.5, 0.1, 0.2, 0.3))
    cfg = GeneratorConfig(cell_sizes={"A": 10}, n_classes=3)
    assert len(cfg.cutpoints) == 2
    (tmp_path / "g.json").write_text(json.dumps(cfg.to_dict()))
    assert load_generator_config(tmp_path / "g.json") == cfg
