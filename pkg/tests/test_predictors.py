import numpy as np
import pytest
from scipy.special import expit

from survey_conformal.data import SurveyDataset
from survey_conformal.predictors import (
    FitMeta,
    OrderedLogisticModel,
    SeparationError,
    fit_ordered_logistic,
    fit_prior,
    ingest_probs,
    load_model,
    predict_probs,
    save_model,
)
from survey_conformal.synthetic import GeneratorConfig, generate


def ds_from(y, X=None, K=None, groups=None):
    n = len(y)
    return SurveyDataset(
        tuple(f"p{i}" for i in range(n)), np.asarray(y), np.ones(n, int) if groups is None else groups,
        np.ones(n), K or int(max(y)), ("A",), covariates=X,
    )


def test_prior_frequencies():
    ds = ds_from([1, 1, 2], K=2)
    m = fit_prior(ds, ds.ids)
    assert m.class_frequencies == pytest.approx([2 / 3, 1 / 3], abs=1e-5)
    ds = ds_from([3] * 10, K=5)
    m = fit_prior(ds, ds.ids)
    assert m.class_frequencies[2] > 1 - 1e-5 and np.all(m.class_frequencies > 0)
    p = predict_probs(m, ds, ds.ids)
    assert np.all(p.values == m.class_frequencies)


def test_prior_within_binomial_se():
    rng = np.random.default_rng(0)
    truth = np.array([0.1, 0.2, 0.4, 0.2, 0.1])
    n = 50_000
    ds = ds_from(rng.choice(5, size=n, p=truth) + 1, K=5)
    f = fit_prior(ds, ds.ids).class_frequencies
    se = np.sqrt(truth * (1 - truth) / n)
    assert np.all(np.abs(f - truth) < 3 * se)


def test_binary_case_matches_logistic_regression():
    sm = pytest.importorskip("statsmodels.api")
    rng = np.random.default_rng(1)
    n = 3000
    x = rng.normal(1.0, 2.0, n)
    y = (rng.random(n) < expit(0.7 * x - 0.3)).astype(int) + 1
    ds = ds_from(y, x[:, None], K=2)
    m = fit_ordered_logistic(ds, ds.ids)
    logit = sm.Logit((y == 2).astype(float), sm.add_constant(x)).fit(disp=0, tol=1e-12)
    # Pr(Y=2|x) = expit(x beta - theta_1)
    assert m.coefficients[0] == pytest.approx(logit.params[1], abs=1e-4)
    assert -m.cutpoints[0] == pytest.approx(logit.params[0], abs=1e-4)
    assert m.fit_meta.converged


def test_parameter_recovery():
    cfg = GeneratorConfig(cell_sizes={"A": 5000}, informativeness=1.0, master_seed=2)
    ds, _, _ = generate(cfg)
    m = fit_ordered_logistic(ds, ds.ids)
    assert np.all(np.abs(m.cutpoints - np.array(cfg.cutpoints)) < 0.1)
    assert np.all(np.abs(m.coefficients - cfg.direction()) < 0.1)
    # objective history decreases
    h = np.array(m.fit_meta.history)
    assert np.all(np.diff(h) <= 1e-12)


def test_intercept_only_gives_marginals():
    cfg = GeneratorConfig(cell_sizes={"A": 2000}, master_seed=3)
    ds, _, _ = generate(cfg)
    m = fit_ordered_logistic(ds, ds.ids, covariates=[])
    p = predict_probs(m, ds, ds.ids).values
    assert np.allclose(p, p[0])
    emp = np.bincount(ds.outcomes - 1, minlength=5) / ds.n
    assert p[0] == pytest.approx(emp, abs=1e-5)


def test_zero_coefficients_rows_independent_of_x():
    m = OrderedLogisticModel(np.array([-1.0, 0.0, 1.0]), np.zeros(2), FitMeta(0, 0.0, True, 0.0))
    p = m.predict_proba(np.random.default_rng(4).normal(size=(20, 2)))
    assert np.allclose(p, p[0], atol=0)


def test_cdf_decreasing_in_x():
    m = OrderedLogisticModel(np.array([-1.0, 0.2, 1.3]), np.array([0.8]), FitMeta(0, 0.0, True, 0.0))
    grid = np.linspace(-5, 5, 101)[:, None]
    F = m.cdf(grid)
    assert np.all(np.diff(F[:, :3], axis=0) < 0)


def test_separation_raises():
    x = np.linspace(-3, 3, 200)
    y = (x > 0).astype(int) + 1
    ds = ds_from(y, x[:, None], K=2)
    with pytest.raises(SeparationError):
        fit_ordered_logistic(ds, ds.ids, divergence_norm=25.0)


def test_model_round_trip(tmp_path):
    cfg = GeneratorConfig(cell_sizes={"A": 800}, master_seed=5)
    ds, _, _ = generate(cfg)
    m = fit_ordered_logistic(ds, ds.ids)
    save_model(m, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    assert np.array_equal(predict_probs(back, ds, ds.ids).values, predict_probs(m, ds, ds.ids).values)


def write_probs(tmp_path, rows):
    p = tmp_path / "p.csv"
    p.write_text("id,p1,p2\n" + "".join(f"{r}\n" for r in rows))
    return p


def test_ingest_rules(tmp_path):
    ds = ds_from([1, 2], K=2)
    pm = ingest_probs(write_probs(tmp_path, ["p0,0.3,0.7", "p1,0.5000004,0.5"]), ds, "ext")
    assert pm.values.sum(axis=1) == pytest.approx([1, 1], abs=1e-15)
    with pytest.raises(ValueError, match="p1"):
        ingest_probs(write_probs(tmp_path, ["p0,0.3,0.7", "p1,0.4,0.4"]), ds)
    with pytest.raises(KeyError, match="zz"):
        ingest_probs(write_probs(tmp_path, ["zz,0.3,0.7"]), ds)
    with pytest.raises(ValueError, match="p0"):
        ingest_probs(write_probs(tmp_path, ["p0,-0.1,1.1"]), ds)
