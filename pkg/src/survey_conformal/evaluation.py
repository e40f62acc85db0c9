"""Survey-weighted coverage metrics, paired split statistics and failure diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from .conformal import PredictionSets
from .data import ProbabilityMatrix, SurveyDataset

Z95 = 1.96


def _fsum(x: np.ndarray) -> float:
    return math.fsum(np.asarray(x, dtype=np.float64).tolist())


def _test_arrays(sets: PredictionSets, ds: SurveyDataset, test_ids: Iterable[str] | None):
    ids = sets.ids if test_ids is None else tuple(str(i) for i in test_ids)
    if ids != sets.ids:
        pos = {rid: i for i, rid in enumerate(sets.ids)}
        sel = np.array([pos[i] for i in ids], dtype=np.int64)
    else:
        sel = np.arange(len(ids))
    rows = ds.rows(ids)
    member = sets.membership[sel]
    covered = member[np.arange(len(ids)), ds.outcomes[rows] - 1]
    return ds.weights[rows], covered, member.sum(axis=1), ds.groups[rows]


def weighted_mean(values: np.ndarray, weights: np.ndarray) -> float:
    weights = np.asarray(weights, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    total = _fsum(weights)
    if not total > 0:
        raise ZeroDivisionError("zero total weight")
    if np.all(weights == weights[0]):
        # a common weight cancels; dividing by n keeps the unweighted value bit-exact
        return _fsum(values) / values.size
    return _fsum(weights * values) / total


def weighted_coverage(sets: PredictionSets, ds: SurveyDataset, test_ids: Iterable[str] | None = None) -> float:
    w, covered, _, _ = _test_arrays(sets, ds, test_ids)
    return weighted_mean(covered, w)


def weighted_group_coverage(sets: PredictionSets, ds: SurveyDataset, test_ids: Iterable[str] | None = None) -> dict[int, float]:
    """Coverage per group; groups with no test weight are left out."""
    w, covered, _, g = _test_arrays(sets, ds, test_ids)
    out = {}
    for grp in np.unique(g).tolist():
        m = g == grp
        out[int(grp)] = weighted_mean(covered[m], w[m])
    return out


def weighted_gap(group_cov: Mapping[int, float]) -> float:
    if not group_cov:
        raise ValueError("no groups to compare")
    vals = list(group_cov.values())
    return max(vals) - min(vals)


def weighted_size(sets: PredictionSets, ds: SurveyDataset, test_ids: Iterable[str] | None = None) -> float:
    w, _, size, _ = _test_arrays(sets, ds, test_ids)
    return weighted_mean(size, w)


@dataclass
class GroupMetrics:
    weighted_coverage: float
    weighted_size: float
    threshold: float
    n_test: int
    unweighted_coverage: float
    unweighted_size: float
    n_cal: int = 0


@dataclass
class SplitResult:
    split_index: int
    method: str
    model_tag: str
    weighted_coverage: float
    unweighted_coverage: float
    weighted_gap: float
    unweighted_gap: float
    weighted_size: float
    unweighted_size: float
    n_empty: int = 0
    per_group: dict[int, GroupMetrics] = field(default_factory=dict)

    METRICS = (
        "weighted_coverage",
        "unweighted_coverage",
        "weighted_gap",
        "unweighted_gap",
        "weighted_size",
        "unweighted_size",
    )

    def row(self) -> dict:
        d = {"split_index": self.split_index, "model": self.model_tag, "method": self.method}
        for m in self.METRICS:
            d[m] = getattr(self, m)
        d["n_empty"] = self.n_empty
        return d


def evaluate_split(
    sets: PredictionSets,
    ds: SurveyDataset,
    split_index: int,
    method: str,
    model_tag: str,
    thresholds=None,
) -> SplitResult:
    """All coverage, gap and size metrics for one split, weighted and unweighted."""
    w, covered, size, g = _test_arrays(sets, ds, None)
    ones = np.ones_like(w)
    per_group: dict[int, GroupMetrics] = {}
    for grp in np.unique(g).tolist():
        m = g == grp
        per_group[int(grp)] = GroupMetrics(
            weighted_coverage=weighted_mean(covered[m], w[m]),
            weighted_size=weighted_mean(size[m], w[m]),
            threshold=math.nan if thresholds is None else thresholds.threshold_for(grp),
            n_test=int(m.sum()),
            unweighted_coverage=weighted_mean(covered[m], ones[m]),
            unweighted_size=weighted_mean(size[m], ones[m]),
            n_cal=0 if thresholds is None else int(thresholds.cell_sizes.get(grp, 0)),
        )
    return SplitResult(
        split_index=split_index,
        method=method,
        model_tag=model_tag,
        weighted_coverage=weighted_mean(covered, w),
        unweighted_coverage=weighted_mean(covered, ones),
        weighted_gap=weighted_gap({k: v.weighted_coverage for k, v in per_group.items()}),
        unweighted_gap=weighted_gap({k: v.unweighted_coverage for k, v in per_group.items()}),
        weighted_size=weighted_mean(size, w),
        unweighted_size=weighted_mean(size, ones),
        n_empty=int((size == 0).sum()),
        per_group=per_group,
    )


# ---------------------------------------------------------------------------
# Paired comparisons across splits


@dataclass
class PairedDelta:
    metric: str
    deltas: list[float]
    mean: float
    sd: float
    se: float
    ci95: tuple[float, float]
    cohens_dz: float | None

    @property
    def dz_defined(self) -> bool:
        return self.cohens_dz is not None

    @property
    def n(self) -> int:
        return len(self.deltas)


def paired_stats(results_a: Sequence[float], results_b: Sequence[float], metric: str = "") -> PairedDelta:
    """Per-split deltas ``b - a`` with mean, SE = SD/sqrt(R), 95% CI and Cohen's d_z.

    SD uses the ``R - 1`` denominator. ``cohens_dz`` is ``None`` when SD is 0.
    """
    a = np.asarray(results_a, dtype=np.float64)
    b = np.asarray(results_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"series differ in length: {a.size} vs {b.size}")
    R = a.size
    if R < 2:
        raise ValueError("need at least two splits for paired statistics")
    d = b - a
    mean = _fsum(d) / R
    sd = math.sqrt(_fsum((d - mean) ** 2) / (R - 1))
    se = sd / math.sqrt(R)
    half = Z95 * se
    return PairedDelta(metric, d.tolist(), mean, sd, se, (mean - half, mean + half), mean / sd if sd > 0 else None)


# ---------------------------------------------------------------------------
# Diagnostics


@dataclass
class Overconfidence:
    accuracy: float
    confidence: float
    overconfidence: float


def overconfidence_by_group(
    probs: ProbabilityMatrix,
    sets: PredictionSets | None,
    ds: SurveyDataset,
    test_ids: Iterable[str],
) -> dict[int, Overconfidence]:
    """Weighted argmax accuracy, mean max-probability and their gap per group.

    Argmax ties go to the lower class. ``sets`` is accepted for interface
    symmetry and not used.
    """
    test_ids = [str(i) for i in test_ids]
    rows = ds.rows(test_ids)
    p = probs.rows_for(test_ids)
    pred = np.argmax(p, axis=1) + 1  # first maximum, i.e. the lower class on ties
    correct = (pred == ds.outcomes[rows]).astype(np.float64)
    conf = p.max(axis=1)
    w = ds.weights[rows]
    g = ds.groups[rows]
    out = {}
    for grp in np.unique(g).tolist():
        m = g == grp
        acc = weighted_mean(correct[m], w[m])
        c = weighted_mean(conf[m], w[m])
        out[int(grp)] = Overconfidence(acc, c, c - acc)
    return out


@dataclass(frozen=True)
class GroupDelta:
    """Per-group perturbation of one method relative to a reference in one split."""

    group: int
    n_cal: int
    size_delta: float
    coverage_error_delta: float
    coverage_delta: float = 0.0


def group_deltas(ref: SplitResult, alt: SplitResult, alpha: float) -> list[GroupDelta]:
    """Set-size and coverage-error changes (alt minus ref) for groups present in both.

    Coverage-error worsening is the increase of ``|cov_g - (1 - alpha)|``.
    """
    target = 1.0 - alpha
    out = []
    for g in sorted(set(ref.per_group) & set(alt.per_group)):
        r, a = ref.per_group[g], alt.per_group[g]
        out.append(
            GroupDelta(
                group=g,
                n_cal=a.n_cal or r.n_cal,
                size_delta=a.weighted_size - r.weighted_size,
                coverage_error_delta=abs(a.weighted_coverage - target) - abs(r.weighted_coverage - target),
                coverage_delta=a.weighted_coverage - r.weighted_coverage,
            )
        )
    return out


FAILURE_MODES = ("set_size_inflation", "coverage_error_worsening")


def _argmax_group(deltas: Sequence[GroupDelta], key) -> int:
    # largest value; ties go to the smaller calibration cell, then the lower index
    best = max(deltas, key=lambda d: (key(d), -d.n_cal, -d.group))
    return best.group


def extrema_concentration(per_split_group_deltas: Sequence[Sequence[GroupDelta]]) -> dict[str, dict[int, int]]:
    """How often each group is the single worst-affected cell, per failure mode."""
    out: dict[str, dict[int, int]] = {m: {} for m in FAILURE_MODES}
    for deltas in per_split_group_deltas:
        if not deltas:
            continue
        for mode, key in (
            ("set_size_inflation", lambda d: d.size_delta),
            ("coverage_error_worsening", lambda d: d.coverage_error_delta),
        ):
            g = _argmax_group(deltas, key)
            out[mode][g] = out[mode].get(g, 0) + 1
    return {m: dict(sorted(c.items())) for m, c in out.items()}


def average_ranks(x: np.ndarray) -> np.ndarray:
    return stats.rankdata(x, method="average")


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - _fsum(x) / x.size
    yc = y - _fsum(y) / y.size
    r = _fsum(xc * yc) / math.sqrt(_fsum(xc * xc) * _fsum(yc * yc))
    return max(-1.0, min(1.0, r))


@dataclass
class Correlation:
    pearson_r: float
    spearman_rho: float
    n: int
    pearson_p: float = math.nan
    spearman_p: float = math.nan

    @property
    def p_flags(self) -> dict[str, bool]:
        return {"pearson_p_lt_0.001": self.pearson_p < 1e-3, "spearman_p_lt_0.001": self.spearman_p < 1e-3}


def cell_size_correlations(observations: Sequence[tuple[float, float]]) -> Correlation:
    """Pearson r and Spearman rho (Pearson on average ranks) of ``(n_g, delta)`` pairs."""
    obs = np.asarray(observations, dtype=np.float64)
    if obs.ndim != 2 or obs.shape[0] < 3:
        raise ValueError("need at least 3 observations")
    x, y = obs[:, 0], obs[:, 1]
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise ValueError("degenerate variance in cell sizes or deltas")
    r = _pearson(x, y)
    rho = _pearson(average_ranks(x), average_ranks(y))
    n = x.size
    return Correlation(r, rho, n, _t_pvalue(r, n), _t_pvalue(rho, n))


def _t_pvalue(r: float, n: int) -> float:
    if n <= 2 or abs(r) >= 1:
        return 0.0 if abs(r) >= 1 else math.nan
    t = r * math.sqrt((n - 2) / (1 - r * r))
    return float(2 * stats.t.sf(abs(t), n - 2))


@dataclass
class DiagnosticsReport:
    overconfidence: dict[str, dict[int, Overconfidence]] = field(default_factory=dict)
    extrema_counts: dict[str, dict[str, dict[int, int]]] = field(default_factory=dict)
    correlations: dict[tuple[str, str], Correlation] = field(default_factory=dict)
    n_splits: int = 0
    group_labels: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        def label(g: int) -> str:
            return self.group_labels[g - 1] if self.group_labels else str(g)

        return {
            "n_splits": self.n_splits,
            "overconfidence": {
                model: {
                    label(g): {"weighted_accuracy": o.accuracy, "weighted_confidence": o.confidence, "overconfidence": o.overconfidence}
                    for g, o in sorted(groups.items())
                }
                for model, groups in sorted(self.overconfidence.items())
            },
            "extrema_counts": {
                key: {mode: {label(g): c for g, c in counts.items()} for mode, counts in modes.items()}
                for key, modes in sorted(self.extrema_counts.items())
            },
            "correlations": [
                {
                    "model": model,
                    "metric": metric,
                    "pearson_r": c.pearson_r,
                    "spearman_rho": c.spearman_rho,
                    "n": c.n,
                    **c.p_flags,
                }
                for (model, metric), c in sorted(self.correlations.items())
            ],
        }
