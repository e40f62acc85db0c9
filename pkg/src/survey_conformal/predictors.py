"""Base predictors producing ordinal class-probability matrices.

Two models are fitted natively: a covariate-free prior that returns the
training-set class distribution, and a proportional-odds (ordered logistic)
model with

    Pr(Y <= c | x) = logistic(theta_c - beta' x),   theta_1 < ... < theta_{K-1}.

Probabilities from any other model are read from ``id,p1,...,pK`` CSV files.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import optimize
from scipy.special import expit, log_expit

from .data import ProbabilityMatrix, SurveyDataset

PRIOR_SMOOTHING = 1e-6
INGEST_SUM_TOL = 1e-6


class SeparationError(RuntimeError):
    """Parameters diverged while fitting, the usual sign of perfect separation."""


@dataclass(frozen=True)
class PriorModel:
    class_frequencies: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.class_frequencies, dtype=np.float64)
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ValueError("class_frequencies must be a probability vector")
        object.__setattr__(self, "class_frequencies", p)

    @property
    def n_classes(self) -> int:
        return len(self.class_frequencies)

    def to_dict(self) -> dict:
        return {"model": "prior", "class_frequencies": self.class_frequencies.tolist()}


@dataclass(frozen=True)
class FitMeta:
    iterations: int
    objective: float
    converged: bool
    grad_max_norm: float
    history: tuple[float, ...] = ()


@dataclass(frozen=True)
class OrderedLogisticModel:
    """Proportional-odds model on the original covariate scale.

    ``center`` and ``scale`` are the training standardisation statistics the
    optimiser worked with; they are kept for provenance only.
    """

    cutpoints: np.ndarray
    coefficients: np.ndarray
    fit_meta: FitMeta
    center: np.ndarray = field(default_factory=lambda: np.zeros(0))
    scale: np.ndarray = field(default_factory=lambda: np.zeros(0))
    covariate_names: tuple[str, ...] = ()

    @property
    def n_classes(self) -> int:
        return len(self.cutpoints) + 1

    def cdf(self, x: np.ndarray) -> np.ndarray:
        """Cumulative probabilities Pr(Y <= c | x) for c = 1..K (last column is 1)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        eta = x @ self.coefficients if self.coefficients.size else np.zeros(x.shape[0])
        F = expit(self.cutpoints[None, :] - eta[:, None])
        return np.hstack([F, np.ones((F.shape[0], 1))])

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        F = self.cdf(x)
        p = np.diff(F, axis=1, prepend=0.0)
        p = np.clip(p, 0.0, None)
        return p / p.sum(axis=1, keepdims=True)

    def to_dict(self) -> dict:
        m = self.fit_meta
        return {
            "model": "ordered_logistic",
            "cutpoints": self.cutpoints.tolist(),
            "coefficients": self.coefficients.tolist(),
            "covariate_names": list(self.covariate_names),
            "standardization": {"center": self.center.tolist(), "scale": self.scale.tolist()},
            "fit_meta": {
                "iterations": m.iterations,
                "objective": m.objective,
                "converged": m.converged,
                "grad_max_norm": m.grad_max_norm,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OrderedLogisticModel":
        m = d["fit_meta"]
        std = d.get("standardization", {})
        return cls(
            cutpoints=np.array(d["cutpoints"], dtype=np.float64),
            coefficients=np.array(d["coefficients"], dtype=np.float64),
            fit_meta=FitMeta(m["iterations"], m["objective"], m["converged"], m.get("grad_max_norm", float("nan"))),
            center=np.array(std.get("center", []), dtype=np.float64),
            scale=np.array(std.get("scale", []), dtype=np.float64),
            covariate_names=tuple(d.get("covariate_names", ())),
        )


def save_model(model: PriorModel | OrderedLogisticModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=2) + "\n")


def load_model(path: str | Path) -> PriorModel | OrderedLogisticModel:
    d = json.loads(Path(path).read_text())
    if d["model"] == "prior":
        return PriorModel(np.array(d["class_frequencies"]))
    return OrderedLogisticModel.from_dict(d)


# ---------------------------------------------------------------------------
# Prior baseline


def fit_prior(ds: SurveyDataset, train_ids: Iterable[str], smoothing: float = PRIOR_SMOOTHING) -> PriorModel:
    rows = ds.rows(train_ids)
    if rows.size == 0:
        raise ValueError("empty training set")
    counts = np.bincount(ds.outcomes[rows] - 1, minlength=ds.n_classes).astype(np.float64)
    p = counts / rows.size + smoothing
    return PriorModel(p / p.sum())


# ---------------------------------------------------------------------------
# Ordered logistic


def _unpack(params: np.ndarray, K: int):
    theta = np.empty(K - 1)
    theta[0] = params[0]
    if K > 2:
        theta[1:] = params[0] + np.cumsum(np.exp(params[1 : K - 1]))
    return theta, params[K - 1 :]


def _log_diff_expit(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """log(expit(a) - expit(b)) for a > b, stable in both tails."""
    # expit(a) - expit(b) = expit(a) * expit(-b) * (1 - exp(b - a))
    return log_expit(a) + log_expit(-b) + np.log1p(-np.exp(b - a))


def _nll_and_grad(params: np.ndarray, X: np.ndarray, y0: np.ndarray, K: int):
    """Mean negative log-likelihood and its gradient in the unconstrained
    parameterisation (theta_1, log-gaps, beta)."""
    n = X.shape[0]
    theta, beta = _unpack(params, K)
    eta = X @ beta if beta.size else np.zeros(n)
    ext = np.concatenate([[-np.inf], theta, [np.inf]])
    a = ext[y0 + 1] - eta  # upper cut
    b = ext[y0] - eta  # lower cut
    top = np.isinf(a)
    bot = np.isinf(b)
    logp = np.empty(n)
    mid = ~(top | bot)
    logp[mid] = _log_diff_expit(a[mid], b[mid])
    logp[top & ~bot] = log_expit(-b[top & ~bot])
    logp[bot & ~top] = log_expit(a[bot & ~top])
    logp[top & bot] = 0.0
    nll = -logp.mean()

    # d log p / d a = f(a) / p and d log p / d b = -f(b) / p with f the logistic density
    p = np.exp(logp)
    fa = expit(a) * expit(-a)
    fb = expit(b) * expit(-b)
    p = np.maximum(p, 1e-300)
    da = fa / p
    db = -fb / p
    g_theta = np.zeros(K - 1)
    upper = ~top
    np.add.at(g_theta, y0[upper], da[upper])
    lower = ~bot
    np.add.at(g_theta, y0[lower] - 1, db[lower])
    g_eta = -(da + db)
    g_beta = X.T @ g_eta if beta.size else np.zeros(0)

    # chain rule: theta_k = params_0 + sum_{j<k} exp(params_j)
    g_params = np.empty_like(params)
    g_params[0] = g_theta.sum()
    if K > 2:
        gaps = np.exp(params[1 : K - 1])
        tail = np.cumsum(g_theta[::-1])[::-1]  # sum_{k>=j} g_theta_k
        g_params[1 : K - 1] = gaps * tail[1:]
    g_params[K - 1 :] = g_beta
    return nll, -g_params / n


def fit_ordered_logistic(
    ds: SurveyDataset,
    train_ids: Iterable[str],
    covariates: Sequence[str] | None = None,
    max_iters: int = 500,
    gtol: float = 1e-6,
    divergence_norm: float = 1e4,
) -> OrderedLogisticModel:
    """Unweighted maximum-likelihood proportional-odds fit.

    Covariates are standardised on the training rows before optimisation and
    the estimates mapped back to the original scale. ``covariates`` selects a
    subset of columns by name (``[]`` fits the intercept-only model). A fit
    that hits ``max_iters`` is returned with ``converged=False``; parameters
    whose norm exceeds ``divergence_norm`` raise :class:`SeparationError`.
    """
    rows = ds.rows(train_ids)
    K = ds.n_classes
    if covariates is None:
        cols = list(range(ds.n_covariates))
        if ds.covariates is None:
            raise ValueError("dataset has no covariates; pass covariates=[] for the intercept-only model")
    else:
        names = list(ds.covariate_names) or [f"x{j + 1}" for j in range(ds.n_covariates)]
        missing = [c for c in covariates if c not in names]
        if missing:
            raise ValueError(f"unknown covariate(s): {missing}")
        cols = [names.index(c) for c in covariates]
    y0 = ds.outcomes[rows] - 1
    if np.unique(y0).size < 2:
        raise ValueError("need at least two distinct outcome classes in training data")
    X = ds.covariates[np.ix_(rows, cols)] if cols else np.zeros((rows.size, 0))
    center = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    Z = (X - center) / scale

    # start from the empirical cumulative logits
    counts = np.bincount(y0, minlength=K) + 0.5
    cum = np.cumsum(counts)[:-1] / counts.sum()
    theta0 = np.log(cum / (1 - cum))
    start = np.concatenate([[theta0[0]], np.log(np.maximum(np.diff(theta0), 1e-3)), np.zeros(len(cols))])

    history: list[float] = []

    def watch(xk):
        if np.linalg.norm(xk) > divergence_norm:
            raise SeparationError(f"parameter norm exceeded {divergence_norm:g}; outcome likely separable")
        history.append(_nll_and_grad(xk, Z, y0, K)[0])

    res = optimize.minimize(
        _nll_and_grad,
        start,
        args=(Z, y0, K),
        jac=True,
        method="BFGS",
        callback=watch,
        options={"gtol": gtol, "maxiter": max_iters, "norm": np.inf},
    )
    _, grad = _nll_and_grad(res.x, Z, y0, K)
    gmax = float(np.max(np.abs(grad)))
    theta_z, beta_z = _unpack(res.x, K)
    beta = beta_z / scale
    theta = theta_z + float(beta @ center) if beta.size else theta_z
    return OrderedLogisticModel(
        cutpoints=theta,
        coefficients=beta,
        fit_meta=FitMeta(
            iterations=int(res.nit),
            objective=float(res.fun),
            converged=gmax < gtol,
            grad_max_norm=gmax,
            history=tuple(history),
        ),
        center=center,
        scale=scale,
        covariate_names=tuple((list(ds.covariate_names) or [f"x{j + 1}" for j in range(ds.n_covariates)])[c] for c in cols),
    )


# ---------------------------------------------------------------------------
# Prediction and ingestion


def predict_probs(model: PriorModel | OrderedLogisticModel, ds: SurveyDataset, ids: Iterable[str], source_tag: str | None = None) -> ProbabilityMatrix:
    ids = [str(i) for i in ids]
    rows = ds.rows(ids)
    if isinstance(model, PriorModel):
        if model.n_classes != ds.n_classes:
            raise ValueError("model and dataset disagree on the number of classes")
        values = np.broadcast_to(model.class_frequencies, (len(ids), ds.n_classes))
        return ProbabilityMatrix(tuple(ids), values, source_tag or "prior")
    n_feat = model.coefficients.size
    if n_feat:
        names = list(ds.covariate_names) or [f"x{j + 1}" for j in range(ds.n_covariates)]
        if ds.covariates is None:
            raise ValueError("model needs covariates but dataset has none")
        if model.covariate_names and all(c in names for c in model.covariate_names):
            cols = [names.index(c) for c in model.covariate_names]
        elif ds.n_covariates == n_feat:
            cols = list(range(n_feat))
        else:
            raise ValueError(f"covariate length mismatch: model expects {n_feat}, dataset has {ds.n_covariates}")
        X = ds.covariates[np.ix_(rows, cols)]
    else:
        X = np.zeros((len(ids), 0))
    return ProbabilityMatrix(tuple(ids), model.predict_proba(X), source_tag or "ordered_logistic")


def ingest_probs(path: str | Path, ds: SurveyDataset, source_tag: str | None = None) -> ProbabilityMatrix:
    """Read an ``id,p1,...,pK`` file and join it to ``ds`` by id.

    Rows whose sum is within 1e-6 of one are renormalised; anything further off
    is rejected with the offending id.
    """
    path = Path(path)
    K = ds.n_classes
    ids: list[str] = []
    rows: list[list[float]] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        want = ["id", *(f"p{c + 1}" for c in range(K))]
        if header[: K + 1] != want:
            raise ValueError(f"expected header {','.join(want)}, got {','.join(header)}")
        for line, rec in enumerate(reader, start=1):
            if not rec:
                continue
            rid = rec[0].strip()
            if not ds.has_id(rid):
                raise KeyError(f"unknown id {rid!r} at row {line}")
            p = [float(v) for v in rec[1 : K + 1]]
            if any(v < 0 or not math.isfinite(v) for v in p):
                raise ValueError(f"negative or non-finite probability for id {rid!r}")
            total = math.fsum(p)
            if abs(total - 1.0) > INGEST_SUM_TOL:
                raise ValueError(f"row for id {rid!r} sums to {total!r}, outside 1 +/- {INGEST_SUM_TOL:g}")
            ids.append(rid)
            rows.append([v / total for v in p])
    values = np.array(rows, dtype=np.float64).reshape(len(ids), K)
    return ProbabilityMatrix(tuple(ids), values, source_tag or path.stem)
