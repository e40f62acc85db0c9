"""Synthetic survey populations with planted structure.

Each group has its own proportional-odds outcome model driven by a scalar
covariate index ``z = u' x`` (``x`` standard normal, ``u`` a fixed unit
vector)::

    Pr(Y <= c | x, g) = logistic(theta_c + shift_g - informativeness * scale_g * z)

The reference predictor is the true model, optionally distorted per group as
``p ~ p ** gamma_g`` (``gamma > 1`` overconfident, ``gamma < 1`` underconfident).
Planted per-group class distributions and overconfidence are computed by
numerical integration over ``z`` and recorded in the manifest.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np
from scipy.special import expit

from .data import ProbabilityMatrix, SurveyDataset
from .rng import derive_seed, generator

DEFAULT_CUTPOINTS = (-1.6, -0.5, 0.4, 1.5)
_GRID = np.linspace(-9.0, 9.0, 36001)
_GRID_W = np.exp(-0.5 * _GRID**2) / math.sqrt(2 * math.pi) * (_GRID[1] - _GRID[0])


@dataclass
class GeneratorConfig:
    cell_sizes: dict[str, int]
    n_classes: int = 5
    cutpoints: tuple[float, ...] | None = None
    group_shift: dict[str, float] = field(default_factory=dict)
    coefficient_scale: dict[str, float] = field(default_factory=dict)
    informativeness: float = 1.0
    miscalibration: dict[str, float] = field(default_factory=dict)
    n_covariates: int = 4
    weight_law: dict = field(default_factory=lambda: {"kind": "constant"})
    group_weight_scale: dict[str, float] = field(default_factory=dict)
    master_seed: int = 0

    def __post_init__(self):
        self.cell_sizes = {str(k): int(v) for k, v in self.cell_sizes.items()}
        if not self.cell_sizes:
            raise ValueError("need at least one group")
        if any(v < 1 for v in self.cell_sizes.values()):
            raise ValueError("cell sizes must be >= 1")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.informativeness < 0:
            raise ValueError("informativeness must be >= 0")
        if self.n_covariates < 1:
            raise ValueError("n_covariates must be >= 1")
        if self.cutpoints is None:
            if self.n_classes == len(DEFAULT_CUTPOINTS) + 1:
                self.cutpoints = DEFAULT_CUTPOINTS
            else:
                self.cutpoints = tuple(np.linspace(-1.5, 1.5, self.n_classes - 1).tolist())
        self.cutpoints = tuple(float(c) for c in self.cutpoints)
        if len(self.cutpoints) != self.n_classes - 1 or np.any(np.diff(self.cutpoints) <= 0):
            raise ValueError("cutpoints must be K-1 strictly increasing values")
        for name, m in (("group_shift", self.group_shift), ("coefficient_scale", self.coefficient_scale), ("miscalibration", self.miscalibration), ("group_weight_scale", self.group_weight_scale)):
            unknown = set(m) - set(self.cell_sizes)
            if unknown:
                raise ValueError(f"{name} names unknown group(s): {sorted(unknown)}")
        if any(v <= 0 for v in self.miscalibration.values()):
            raise ValueError("miscalibration exponents must be positive")
        kind = self.weight_law.get("kind", "constant")
        if kind not in ("constant", "lognormal"):
            raise ValueError(f"unknown weight law {kind!r}")

    @property
    def group_labels(self) -> tuple[str, ...]:
        return tuple(self.cell_sizes)

    def theta(self, label: str) -> np.ndarray:
        return np.array(self.cutpoints) + self.group_shift.get(label, 0.0)

    def slope(self, label: str) -> float:
        return self.informativeness * self.coefficient_scale.get(label, 1.0)

    def gamma(self, label: str) -> float:
        return self.miscalibration.get(label, 1.0)

    def direction(self) -> np.ndarray:
        return np.ones(self.n_covariates) / math.sqrt(self.n_covariates)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cutpoints"] = list(self.cutpoints)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "GeneratorConfig":
        d = dict(d)
        if d.get("cutpoints") is not None:
            d["cutpoints"] = tuple(d["cutpoints"])
        return cls(**d)


def po_probs(theta: np.ndarray, eta: np.ndarray) -> np.ndarray:
    eta = np.asarray(eta, dtype=np.float64).reshape(-1)
    F = expit(theta[None, :] - eta[:, None])
    F = np.hstack([np.zeros((eta.size, 1)), F, np.ones((eta.size, 1))])
    p = np.clip(np.diff(F, axis=1), 0.0, None)
    return p / p.sum(axis=1, keepdims=True)


def distort(p: np.ndarray, gamma: float) -> np.ndarray:
    if gamma == 1.0:
        return p
    with np.errstate(divide="ignore"):
        logp = np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), -np.inf)
    logq = gamma * logp
    logq -= logq.max(axis=1, keepdims=True)
    q = np.exp(logq)
    return q / q.sum(axis=1, keepdims=True)


@dataclass
class GeneratorManifest:
    config: dict
    direction: list[float]
    group_cutpoints: dict[str, list[float]]
    group_slope: dict[str, float]
    class_distribution: dict[str, list[float]]
    overconfidence: dict[str, float]
    seed: int

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def planted_truths(config: GeneratorConfig, label: str) -> tuple[np.ndarray, float]:
    """Population class distribution and predictor overconfidence for one group."""
    theta = config.theta(label)
    slope = config.slope(label)
    if slope == 0:
        p = po_probs(theta, np.zeros(1))
        q = distort(p, config.gamma(label))
        k = int(np.argmax(q[0]))
        return p[0], float(q[0].max() - p[0, k])
    p = po_probs(theta, slope * _GRID)
    q = distort(p, config.gamma(label))
    k = np.argmax(q, axis=1)
    marg = _GRID_W @ p
    conf = _GRID_W @ q.max(axis=1)
    acc = _GRID_W @ p[np.arange(len(_GRID)), k]
    scale = _GRID_W.sum()
    return marg / scale, float((conf - acc) / scale)


def build_manifest(config: GeneratorConfig) -> GeneratorManifest:
    dist, over = {}, {}
    for g in config.group_labels:
        d, o = planted_truths(config, g)
        dist[g] = d.tolist()
        over[g] = o
    return GeneratorManifest(
        config=config.to_dict(),
        direction=config.direction().tolist(),
        group_cutpoints={g: config.theta(g).tolist() for g in config.group_labels},
        group_slope={g: config.slope(g) for g in config.group_labels},
        class_distribution=dist,
        overconfidence=over,
        seed=config.master_seed,
    )


@dataclass
class _Draw:
    X: np.ndarray
    y: np.ndarray
    p_true: np.ndarray
    p_model: np.ndarray
    w: np.ndarray


def _sample_group(config: GeneratorConfig, label: str, n: int, rng: np.random.Generator) -> _Draw:
    X = rng.standard_normal((n, config.n_covariates))
    z = X @ config.direction()
    p = po_probs(config.theta(label), config.slope(label) * z)
    # inverse-CDF sampling keeps one uniform per respondent
    u = rng.random(n)
    y = 1 + (u[:, None] > np.cumsum(p, axis=1)[:, :-1]).sum(axis=1)
    law = config.weight_law
    if law.get("kind", "constant") == "lognormal":
        w = rng.lognormal(law.get("mu", 0.0), law.get("sigma", 0.5), size=n)
    else:
        w = np.full(n, float(law.get("value", 1.0)))
    w = w * config.group_weight_scale.get(label, 1.0)
    return _Draw(X, y, p, distort(p, config.gamma(label)), w)


def _assemble(config: GeneratorConfig, parts: list[tuple[str, _Draw]], prefix: str, tag: str):
    labels = config.group_labels
    gidx = {g: i + 1 for i, g in enumerate(labels)}
    X = np.vstack([d.X for _, d in parts])
    n = X.shape[0]
    width = max(6, len(str(n)))
    ids = tuple(f"{prefix}{i:0{width}d}" for i in range(n))
    ds = SurveyDataset(
        ids=ids,
        outcomes=np.concatenate([d.y for _, d in parts]),
        groups=np.concatenate([np.full(len(d.y), gidx[g]) for g, d in parts]),
        weights=np.concatenate([d.w for _, d in parts]),
        n_classes=config.n_classes,
        group_labels=labels,
        covariates=X,
        covariate_names=tuple(f"x{j + 1}" for j in range(config.n_covariates)),
    )
    probs = ProbabilityMatrix(ids, np.vstack([d.p_model for _, d in parts]), tag)
    return ds, probs


def generate(config: GeneratorConfig) -> tuple[SurveyDataset, ProbabilityMatrix, GeneratorManifest]:
    """Dataset with exactly ``config.cell_sizes`` respondents per group, the
    (possibly distorted) true-model probability matrix, and the manifest."""
    parts = []
    for g in config.group_labels:
        rng = generator(derive_seed(config.master_seed, "generate", g))
        parts.append((g, _sample_group(config, g, config.cell_sizes[g], rng)))
    ds, probs = _assemble(config, parts, "r", "oracle")
    return ds, probs, build_manifest(config)


@dataclass
class StreamDraw:
    index: int
    dataset: SurveyDataset
    probs: ProbabilityMatrix
    cal_ids: tuple[str, ...]
    test_ids: tuple[str, ...]


def exchangeable_stream(
    config: GeneratorConfig,
    n_draws: int,
    n_cal: int | None = None,
    n_test: int = 500,
    cal_sampling: str = "iid",
) -> Iterator[StreamDraw]:
    """Repeated calibration/test samples drawn i.i.d. from the planted population.

    Group membership is drawn with probabilities proportional to
    ``config.cell_sizes``. With ``cal_sampling="stratified"`` the calibration
    sample has exactly ``config.cell_sizes`` members per group, which keeps
    calibration and test points exchangeable within each group.
    """
    if cal_sampling not in ("iid", "stratified"):
        raise ValueError("cal_sampling must be 'iid' or 'stratified'")
    labels = config.group_labels
    sizes = np.array([config.cell_sizes[g] for g in labels], dtype=np.float64)
    share = sizes / sizes.sum()
    if n_cal is None:
        n_cal = int(sizes.sum())
    for r in range(n_draws):
        rng = generator(derive_seed(config.master_seed, "stream", r))
        if cal_sampling == "stratified":
            cal_counts = sizes.astype(np.int64)
        else:
            cal_counts = rng.multinomial(n_cal, share)
        test_counts = rng.multinomial(n_test, share)
        parts = []
        for g, nc, nt in zip(labels, cal_counts, test_counts):
            if nc + nt:
                parts.append((g, _sample_group(config, g, int(nc + nt), rng)))
        ds, probs = _assemble(config, parts, f"d{r}-", "oracle")
        # first nc rows of each group block are calibration, the rest test
        cal, test, pos = [], [], 0
        for (g, d), nc in zip(parts, [c for c, t in zip(cal_counts, test_counts) if c + t]):
            block = ds.ids[pos : pos + len(d.y)]
            cal.extend(block[:nc])
            test.extend(block[nc:])
            pos += len(d.y)
        yield StreamDraw(r, ds, probs, tuple(cal), tuple(test))


def load_generator_config(path: str | Path) -> GeneratorConfig:
    return GeneratorConfig.from_dict(json.loads(Path(path).read_text()))
