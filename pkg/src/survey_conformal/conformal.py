"""Ordinal conformal calibration.

Scores use the randomized CDF form ``s(x, y; U) = 1 - F(y | x) + U p_y(x)``.
Thresholds come in four flavours: one global quantile (STANDARD), one per
group (MONDRIAN), per-group quantiles shrunk toward the global one with weight
``n_g / (n_g + lambda)`` (REG_MONDRIAN), and survey-weighted per-group
quantiles (WEIGHTED_MONDRIAN).
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .data import ProbabilityMatrix, SurveyDataset
from .rng import keyed_uniforms

DEFAULT_ALPHA = 0.10
DEFAULT_LAMBDA = 50.0
INF = math.inf


class Method(str, Enum):
    STANDARD = "STANDARD"
    MONDRIAN = "MONDRIAN"
    REG_MONDRIAN = "REG_MONDRIAN"
    WEIGHTED_MONDRIAN = "WEIGHTED_MONDRIAN"


class EmptyCalibrationWarning(UserWarning):
    pass


class CalibrationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Scores


def tail_mass(probs: np.ndarray) -> np.ndarray:
    """``1 - F(y)`` for every label, computed as the sum of mass above ``y``.

    Summing the tail keeps the top label's value at exactly zero even when a
    row's entries do not add to one in floating point.
    """
    rev = np.cumsum(probs[:, ::-1], axis=1)[:, ::-1]
    return np.hstack([rev[:, 1:], np.zeros((probs.shape[0], 1))])


def ordinal_scores(probs: np.ndarray, labels: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Scores for 1-based ``labels`` given one uniform draw per row."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    idx = np.asarray(labels, dtype=np.int64) - 1
    rows = np.arange(probs.shape[0])
    return tail_mass(probs)[rows, idx] + np.asarray(u) * probs[rows, idx]


def all_label_scores(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """(n, K) scores for every candidate label; ``u`` is (n,) or (n, K)."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim == 1:
        u = u[:, None]
    return tail_mass(probs) + u * probs


@dataclass(frozen=True)
class ScoreRecord:
    id: str
    score: float
    u_draw: float
    group: int


@dataclass(frozen=True, eq=False)
class CalibrationScores:
    """Calibration scores in columnar form; iterating yields :class:`ScoreRecord`."""

    ids: tuple[str, ...]
    scores: np.ndarray
    u: np.ndarray
    groups: np.ndarray
    weights: np.ndarray | None = None
    n_groups: int | None = None

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self) -> Iterator[ScoreRecord]:
        for i, rid in enumerate(self.ids):
            yield ScoreRecord(rid, float(self.scores[i]), float(self.u[i]), int(self.groups[i]))

    @classmethod
    def from_records(cls, records: Sequence[ScoreRecord], weights: Mapping[str, float] | None = None) -> "CalibrationScores":
        ids = tuple(r.id for r in records)
        w = None if weights is None else np.array([weights[i] for i in ids], dtype=np.float64)
        return cls(
            ids,
            np.array([r.score for r in records], dtype=np.float64),
            np.array([r.u_draw for r in records], dtype=np.float64),
            np.array([r.group for r in records], dtype=np.int64),
            w,
        )


def score_calibration(probs: ProbabilityMatrix, ds: SurveyDataset, cal_ids: Iterable[str], seed: int) -> CalibrationScores:
    """Score each calibration respondent at its true label with its own U draw."""
    cal_ids = [str(i) for i in cal_ids]
    rows = ds.rows(cal_ids)
    p = probs.rows_for(cal_ids)
    u = keyed_uniforms(seed, ds.id_hash[rows])
    s = ordinal_scores(p, ds.outcomes[rows], u)
    return CalibrationScores(tuple(cal_ids), s, u, ds.groups[rows].copy(), ds.weights[rows].copy(), ds.n_groups)


# ---------------------------------------------------------------------------
# Quantiles


def conformal_rank(n: int, alpha: float) -> int:
    """1-based rank ``ceil((1 - alpha)(n + 1))`` of the conformal quantile."""
    # rounding first keeps e.g. 0.9 * 10 from landing a hair above 9
    return math.ceil(round((1.0 - alpha) * (n + 1), 9))


def conformal_quantile(scores: Sequence[float] | np.ndarray, alpha: float) -> float:
    """The ``ceil((1-alpha)(n+1))``-th smallest of ``scores`` plus ``+inf``."""
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    n = s.size
    if n == 0:
        warnings.warn("empty calibration scores; threshold is +inf", EmptyCalibrationWarning, stacklevel=2)
        return INF
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    k = conformal_rank(n, alpha)
    if k > n:
        return INF
    return float(np.partition(s, k - 1)[k - 1])


def weighted_conformal_quantile(scores: Sequence[float] | np.ndarray, weights: Sequence[float] | np.ndarray, alpha: float) -> float:
    """Smallest score whose cumulative normalised weight reaches ``1 - alpha``.

    A pseudo-observation at ``+inf`` carrying the mean weight plays the role of
    the ``+1`` in the unweighted rank; with equal weights this reduces to
    :func:`conformal_quantile`.
    """
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if s.size != w.size:
        raise ValueError("scores and weights differ in length")
    if s.size == 0:
        warnings.warn("empty calibration scores; threshold is +inf", EmptyCalibrationWarning, stacklevel=2)
        return INF
    if np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be positive and finite")
    order = np.argsort(s, kind="stable")
    s, w = s[order], w[order]
    total = math.fsum(w) + w.mean()
    cum = np.cumsum(w) / total
    hit = np.flatnonzero(cum >= (1.0 - alpha) * (1 - 1e-12))
    return INF if hit.size == 0 else float(s[hit[0]])


def shrinkage_weight(n_g: int | float, lam: float) -> float:
    return n_g / (n_g + lam)


def coverage_floor(n_g: int, alpha: float) -> float:
    """Finite-sample group coverage level ``min(1, 1 - alpha + 1/(n_g + 1))``."""
    if n_g < 1:
        raise ValueError("n_g must be >= 1")
    return min(1.0, 1.0 - alpha + 1.0 / (n_g + 1))


def shrinkage_mse(w: float | np.ndarray, sigma2: float, n_g: int, n_cal: int, bias: float):
    """MSE of ``w q_g + (1 - w) q_global`` under the Bahadur variance model."""
    return w**2 * sigma2 / n_g + (1 - w) ** 2 * (sigma2 / n_cal + bias**2)


def mse_optimal_weight(sigma2: float, n_g: int, n_cal: int, bias: float) -> float:
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    if n_g < 1 or n_cal < 1:
        raise ValueError("n_g and n_cal must be >= 1")
    pooled = sigma2 / n_cal + bias**2
    return pooled / (sigma2 / n_g + pooled)


# ---------------------------------------------------------------------------
# Threshold sets


def _fmt_q(q: float):
    return "+inf" if q == INF else q


def _parse_q(q) -> float:
    return INF if q in ("+inf", "inf", "Infinity") else float(q)


@dataclass
class ThresholdSet:
    method: Method
    alpha: float
    global_q: float
    per_group_q: dict[int, float] = field(default_factory=dict)
    lam: float | None = None
    cell_sizes: dict[int, int] = field(default_factory=dict)
    shrink_weights: dict[int, float] = field(default_factory=dict)
    group_q: dict[int, float] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def threshold_for(self, group: int) -> float:
        if self.method == Method.STANDARD:
            return self.global_q
        try:
            return self.per_group_q[int(group)]
        except KeyError:
            raise CalibrationError(f"no threshold for group {group} under {self.method.value}") from None

    def thresholds_for(self, groups: np.ndarray) -> np.ndarray:
        if self.method == Method.STANDARD:
            return np.full(len(groups), self.global_q)
        return np.array([self.threshold_for(g) for g in groups.tolist()], dtype=np.float64)

    def to_dict(self, group_labels: Sequence[str] | None = None) -> dict:
        def keyed(m):
            return {str(g): m[g] for g in sorted(m)}

        d = {
            "method": self.method.value,
            "alpha": self.alpha,
            "lambda": self.lam,
            "global_q": _fmt_q(self.global_q),
            "per_group_q": {k: _fmt_q(v) for k, v in keyed(self.per_group_q).items()},
            "unshrunk_group_q": {k: _fmt_q(v) for k, v in keyed(self.group_q).items()},
            "cell_sizes": keyed(self.cell_sizes),
            "shrink_weights": keyed(self.shrink_weights),
            "notes": list(self.notes),
        }
        if group_labels is not None:
            d["group_labels"] = list(group_labels)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ThresholdSet":
        return cls(
            method=Method(d["method"]),
            alpha=float(d["alpha"]),
            global_q=_parse_q(d["global_q"]),
            per_group_q={int(k): _parse_q(v) for k, v in d.get("per_group_q", {}).items()},
            lam=d.get("lambda"),
            cell_sizes={int(k): int(v) for k, v in d.get("cell_sizes", {}).items()},
            shrink_weights={int(k): float(v) for k, v in d.get("shrink_weights", {}).items()},
            group_q={int(k): _parse_q(v) for k, v in d.get("unshrunk_group_q", {}).items()},
            notes=list(d.get("notes", [])),
        )

    def save(self, path: str | Path, group_labels: Sequence[str] | None = None) -> None:
        Path(path).write_text(json.dumps(self.to_dict(group_labels), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ThresholdSet":
        return cls.from_dict(json.loads(Path(path).read_text()))


def calibrate(
    scores: CalibrationScores | Sequence[ScoreRecord],
    method: Method | str,
    alpha: float = DEFAULT_ALPHA,
    lam: float | None = DEFAULT_LAMBDA,
    weights: Mapping[str, float] | None = None,
    groups: Iterable[int] | None = None,
) -> ThresholdSet:
    """Calibrate thresholds from scores.

    ``groups`` lists every group that needs a threshold (defaults to the groups
    seen in ``scores``, or ``1..n_groups`` when the scores carry it). Groups
    without calibration scores get ``+inf`` under MONDRIAN and fall back to the
    global threshold under REG_MONDRIAN; both cases are noted in ``notes``.
    """
    method = Method(method)
    if not isinstance(scores, CalibrationScores):
        scores = CalibrationScores.from_records(list(scores), weights)
    elif weights is not None:
        scores = CalibrationScores(
            scores.ids, scores.scores, scores.u, scores.groups,
            np.array([weights[i] for i in scores.ids], dtype=np.float64), scores.n_groups,
        )
    if groups is None:
        groups = range(1, scores.n_groups + 1) if scores.n_groups else np.unique(scores.groups).tolist()
    groups = sorted(int(g) for g in groups)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyCalibrationWarning)
        global_q = conformal_quantile(scores.scores, alpha) if len(scores) else INF
    ts = ThresholdSet(method, alpha, global_q, lam=lam if method == Method.REG_MONDRIAN else None)
    if len(scores) == 0:
        ts.notes.append("empty calibration set: global threshold is +inf")
    counts = np.bincount(scores.groups.astype(np.int64), minlength=max(groups, default=0) + 1) if len(scores) else None
    ts.cell_sizes = {g: int(counts[g]) if counts is not None and g < counts.size else 0 for g in groups}
    if method == Method.STANDARD:
        return ts
    if method == Method.REG_MONDRIAN and (lam is None or not lam > 0):
        raise CalibrationError(f"REG_MONDRIAN needs lambda > 0, got {lam}")
    if method == Method.WEIGHTED_MONDRIAN and scores.weights is None:
        raise CalibrationError("WEIGHTED_MONDRIAN needs calibration weights")

    order = np.argsort(scores.groups, kind="stable")
    g_sorted = scores.groups[order]
    for g in groups:
        lo, hi = np.searchsorted(g_sorted, [g, g + 1])
        idx = order[lo:hi]
        n_g = int(idx.size)
        if n_g == 0:
            ts.notes.append(f"group {g}: no calibration scores")
            warnings.warn(f"group {g} has no calibration scores", EmptyCalibrationWarning, stacklevel=2)
        if method == Method.WEIGHTED_MONDRIAN:
            q_g = weighted_conformal_quantile(scores.scores[idx], scores.weights[idx], alpha) if n_g else INF
        else:
            q_g = conformal_quantile(scores.scores[idx], alpha) if n_g else INF
        ts.group_q[g] = q_g
        if method == Method.REG_MONDRIAN:
            w = shrinkage_weight(n_g, lam)
            ts.shrink_weights[g] = w
            if q_g == INF:
                # the convex combination is undefined; shrink all the way to global
                ts.per_group_q[g] = global_q
                if n_g:
                    ts.notes.append(f"group {g}: group quantile is +inf, using global threshold")
            elif global_q == INF:
                ts.per_group_q[g] = INF
            else:
                ts.per_group_q[g] = w * q_g + (1.0 - w) * global_q
        else:
            ts.per_group_q[g] = q_g
    return ts


# ---------------------------------------------------------------------------
# Prediction sets


@dataclass(frozen=True)
class PredictionSet:
    id: str
    labels: tuple[int, ...]
    covered: bool | None = None
    empty_flag: bool = False

    @property
    def set_size(self) -> int:
        return len(self.labels)


@dataclass(frozen=True, eq=False)
class PredictionSets:
    """Prediction sets for a batch of respondents as a boolean (n, K) membership matrix."""

    ids: tuple[str, ...]
    membership: np.ndarray
    covered: np.ndarray | None = None
    groups: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def sizes(self) -> np.ndarray:
        return self.membership.sum(axis=1)

    @property
    def empty(self) -> np.ndarray:
        return ~self.membership.any(axis=1)

    def __iter__(self) -> Iterator[PredictionSet]:
        empty = self.empty
        for i, rid in enumerate(self.ids):
            labels = tuple(int(c) + 1 for c in np.flatnonzero(self.membership[i]))
            cov = None if self.covered is None else bool(self.covered[i])
            yield PredictionSet(rid, labels, cov, bool(empty[i]))

    def save(self, path: str | Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "labels", "set_size", "covered"])
            for ps in self:
                w.writerow([ps.id, "-".join(map(str, ps.labels)), ps.set_size, "" if ps.covered is None else int(ps.covered)])


def predict_sets(
    probs: ProbabilityMatrix,
    thresholds: ThresholdSet,
    ds: SurveyDataset,
    test_ids: Iterable[str],
    seed: int,
    force_nonempty: bool = False,
    independent_u_per_label: bool = False,
) -> PredictionSets:
    """Include every label whose score is at most the respondent's threshold.

    One U is drawn per respondent and shared by all candidate labels unless
    ``independent_u_per_label`` is set. Empty sets are returned as they are
    unless ``force_nonempty`` adds the argmax label.
    """
    test_ids = [str(i) for i in test_ids]
    rows = ds.rows(test_ids)
    p = probs.rows_for(test_ids)
    keys = ds.id_hash[rows]
    if independent_u_per_label:
        u = np.column_stack([keyed_uniforms(seed, keys, counter=1 + c) for c in range(p.shape[1])])
    else:
        u = keyed_uniforms(seed, keys)
    q = thresholds.thresholds_for(ds.groups[rows])
    member = all_label_scores(p, u) <= q[:, None]
    if force_nonempty:
        empty = ~member.any(axis=1)
        member[empty, np.argmax(p[empty], axis=1)] = True
    y0 = ds.outcomes[rows] - 1
    covered = member[np.arange(len(rows)), y0]
    return PredictionSets(tuple(test_ids), member, covered, ds.groups[rows].copy())
