"""Survey data, probability matrices and group tables."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Mapping, Sequence

import numpy as np

from .rng import id_hashes

if TYPE_CHECKING:
    from .splitter import SplitAssignment

PROB_SUM_TOL = 1e-9


class DataValidationError(ValueError):
    """Raised when input rows violate dataset invariants.

    ``problems`` holds ``(row, message)`` pairs; ``row`` is the 1-based data row
    in the source file, or ``None`` for file-level problems.
    """

    def __init__(self, problems: Sequence[tuple[int | None, str]]):
        self.problems = list(problems)
        lines = [f"row {r}: {m}" if r is not None else m for r, m in self.problems[:20]]
        if len(self.problems) > 20:
            lines.append(f"... and {len(self.problems) - 20} more")
        super().__init__("; ".join(lines))


@dataclass(frozen=True)
class RespondentRecord:
    id: str
    outcome: int
    group: int
    weight: float
    covariates: tuple[float, ...] | None = None


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SurveyDataset:
    """Columnar survey sample.

    Outcomes are 1-based classes in ``1..n_classes``; groups are 1-based
    indices into ``group_labels``.
    """

    ids: tuple[str, ...]
    outcomes: np.ndarray
    groups: np.ndarray
    weights: np.ndarray
    n_classes: int
    group_labels: tuple[str, ...]
    covariates: np.ndarray | None = None
    covariate_names: tuple[str, ...] = ()
    _index: dict = field(default=None, init=False, repr=False)
    _id_hash: np.ndarray = field(default=None, init=False, repr=False)

    def __post_init__(self):
        ids = tuple(str(i) for i in self.ids)
        n = len(ids)
        outcomes = _readonly(np.array(self.outcomes, dtype=np.int64).reshape(-1))
        groups = _readonly(np.array(self.groups, dtype=np.int64).reshape(-1))
        weights = _readonly(np.array(self.weights, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "outcomes", outcomes)
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "group_labels", tuple(str(g) for g in self.group_labels))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))

        if self.n_classes < 2:
            raise DataValidationError([(None, f"n_classes must be >= 2, got {self.n_classes}")])
        if not self.group_labels:
            raise DataValidationError([(None, "group_labels must be non-empty")])
        if not (len(outcomes) == len(groups) == len(weights) == n):
            raise DataValidationError([(None, "column lengths differ")])

        problems: list[tuple[int | None, str]] = []
        index: dict[str, int] = {}
        for i, rid in enumerate(ids):
            if rid in index:
                problems.append((i + 1, f"duplicate id {rid!r}"))
            index[rid] = i
        G = len(self.group_labels)
        for i in np.flatnonzero((outcomes < 1) | (outcomes > self.n_classes)):
            problems.append((int(i) + 1, f"outcome {outcomes[i]} outside [1, {self.n_classes}]"))
        for i in np.flatnonzero((groups < 1) | (groups > G)):
            problems.append((int(i) + 1, f"group index {groups[i]} outside [1, {G}]"))
        for i in np.flatnonzero(~(np.isfinite(weights) & (weights > 0))):
            problems.append((int(i) + 1, f"weight {weights[i]} is not positive and finite"))

        if self.covariates is not None:
            cov = np.array(self.covariates, dtype=np.float64)
            if cov.ndim == 1:
                cov = cov.reshape(n, -1) if n else cov.reshape(0, 0)
            if cov.shape[0] != n:
                problems.append((None, "covariate matrix has wrong number of rows"))
            elif not np.all(np.isfinite(cov)):
                bad = np.flatnonzero(~np.all(np.isfinite(cov), axis=1))
                problems.extend((int(i) + 1, "non-finite covariate") for i in bad)
            object.__setattr__(self, "covariates", _readonly(cov))
            if self.covariate_names and len(self.covariate_names) != cov.shape[1]:
                problems.append((None, "covariate_names length differs from covariate columns"))
        if problems:
            raise DataValidationError(problems)
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def n_groups(self) -> int:
        return len(self.group_labels)

    @property
    def n_covariates(self) -> int:
        return 0 if self.covariates is None else self.covariates.shape[1]

    @property
    def id_hash(self) -> np.ndarray:
        if self._id_hash is None:
            object.__setattr__(self, "_id_hash", _readonly(id_hashes(self.ids)))
        return self._id_hash

    @property
    def respondents(self) -> list[RespondentRecord]:
        cov = self.covariates
        return [
            RespondentRecord(
                rid,
                int(self.outcomes[i]),
                int(self.groups[i]),
                float(self.weights[i]),
                None if cov is None else tuple(float(v) for v in cov[i]),
            )
            for i, rid in enumerate(self.ids)
        ]

    def rows(self, ids: Iterable[str]) -> np.ndarray:
        """Row positions for ``ids``; raises KeyError naming an unknown id."""
        index = self._index
        try:
            return np.fromiter((index[str(i)] for i in ids), dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"id {exc.args[0]!r} not in dataset") from None

    def has_id(self, rid: str) -> bool:
        return rid in self._index

    def take(self, rows: np.ndarray) -> "SurveyDataset":
        rows = np.asarray(rows, dtype=np.int64)
        return SurveyDataset(
            ids=tuple(self.ids[i] for i in rows),
            outcomes=self.outcomes[rows],
            groups=self.groups[rows],
            weights=self.weights[rows],
            n_classes=self.n_classes,
            group_labels=self.group_labels,
            covariates=None if self.covariates is None else self.covariates[rows],
            covariate_names=self.covariate_names,
        )

    def subset(self, ids: Iterable[str]) -> "SurveyDataset":
        return self.take(self.rows(ids))

    @classmethod
    def from_records(
        cls,
        records: Sequence[RespondentRecord],
        n_classes: int,
        group_labels: Sequence[str],
        covariate_names: Sequence[str] = (),
    ) -> "SurveyDataset":
        has_cov = [r.covariates is not None for r in records]
        if any(has_cov) and not all(has_cov):
            raise DataValidationError([(None, "covariates present on some records but not all")])
        cov = None
        if records and all(has_cov):
            lengths = {len(r.covariates) for r in records}
            if len(lengths) != 1:
                raise DataValidationError([(None, f"covariate vectors differ in length: {sorted(lengths)}")])
            cov = np.array([r.covariates for r in records], dtype=np.float64)
        return cls(
            ids=tuple(r.id for r in records),
            outcomes=[r.outcome for r in records],
            groups=[r.group for r in records],
            weights=[r.weight for r in records],
            n_classes=n_classes,
            group_labels=tuple(group_labels),
            covariates=cov,
            covariate_names=tuple(covariate_names),
        )

    def same_records(self, other: "SurveyDataset") -> bool:
        if (self.ids, self.n_classes, self.group_labels) != (other.ids, other.n_classes, other.group_labels):
            return False
        if (self.covariates is None) != (other.covariates is None):
            return False
        same = (
            np.array_equal(self.outcomes, other.outcomes)
            and np.array_equal(self.groups, other.groups)
            and np.array_equal(self.weights, other.weights)
        )
        if self.covariates is not None:
            same = same and np.array_equal(self.covariates, other.covariates)
        return same


# ---------------------------------------------------------------------------
# CSV schema and IO


@dataclass(frozen=True)
class DatasetSchema:
    outcome: str
    group: str
    weight: str
    n_classes: int
    id: str = "id"
    covariates: tuple[str, ...] = ()
    group_labels: tuple[str, ...] | None = None

    @classmethod
    def from_dict(cls, d: Mapping) -> "DatasetSchema":
        labels = d.get("group_labels")
        return cls(
            outcome=d["outcome"],
            group=d["group"],
            weight=d["weight"],
            n_classes=int(d["n_classes"]),
            id=d.get("id", "id"),
            covariates=tuple(d.get("covariates", ())),
            group_labels=None if labels is None else tuple(str(g) for g in labels),
        )

    def to_dict(self) -> dict:
        d = {
            "id": self.id,
            "outcome": self.outcome,
            "group": self.group,
            "weight": self.weight,
            "n_classes": self.n_classes,
            "covariates": list(self.covariates),
        }
        if self.group_labels is not None:
            d["group_labels"] = list(self.group_labels)
        return d

    @classmethod
    def load(cls, path: str | Path) -> "DatasetSchema":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _parse_float(text: str) -> float:
    return float(text.strip())


def load_dataset(path: str | Path, schema: DatasetSchema | Mapping) -> SurveyDataset:
    """Read a survey CSV and validate it against ``schema``.

    Every offending row is collected before raising
    :class:`DataValidationError`, so one pass reports all problems.
    """
    if not isinstance(schema, DatasetSchema):
        schema = DatasetSchema.from_dict(schema)
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataValidationError([(None, "empty file")]) from None
        header = [h.strip() for h in header]
        wanted = [schema.id, schema.outcome, schema.group, schema.weight, *schema.covariates]
        missing = [c for c in wanted if c not in header]
        if missing:
            raise DataValidationError([(None, f"missing column(s): {', '.join(missing)}")])
        col = {name: header.index(name) for name in wanted}
        raw = list(reader)

    problems: list[tuple[int | None, str]] = []
    ids, outcomes, group_names, weights, covs = [], [], [], [], []
    seen: dict[str, int] = {}
    for r, row in enumerate(raw, start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) < len(header):
            problems.append((r, f"expected {len(header)} fields, got {len(row)}"))
            continue
        rid = row[col[schema.id]].strip()
        if rid in seen:
            problems.append((r, f"duplicate id {rid!r} (first at row {seen[rid]})"))
        seen.setdefault(rid, r)
        try:
            y_f = float(row[col[schema.outcome]])
            if not y_f.is_integer():
                raise ValueError
            y = int(y_f)
        except ValueError:
            problems.append((r, f"outcome {row[col[schema.outcome]]!r} is not an integer"))
            y = None
        if y is not None and not 1 <= y <= schema.n_classes:
            problems.append((r, f"outcome {y} outside declared range [1, {schema.n_classes}]"))
        try:
            w = _parse_float(row[col[schema.weight]])
        except ValueError:
            problems.append((r, f"weight {row[col[schema.weight]]!r} is not a number"))
            w = None
        if w is not None and not (math.isfinite(w) and w > 0):
            problems.append((r, f"weight {w!r} is not positive and finite"))
        x = []
        for c in schema.covariates:
            try:
                x.append(_parse_float(row[col[c]]))
            except ValueError:
                problems.append((r, f"covariate {c}={row[col[c]]!r} is not a number"))
        ids.append(rid)
        outcomes.append(y if y is not None else 0)
        group_names.append(row[col[schema.group]].strip())
        weights.append(w if w is not None else float("nan"))
        covs.append(x)

    if schema.group_labels is not None:
        labels = tuple(schema.group_labels)
        unknown = sorted(set(group_names) - set(labels))
        for r, g in enumerate(group_names, start=1):
            if g in unknown:
                problems.append((r, f"group {g!r} not in declared group_labels"))
    else:
        labels = tuple(dict.fromkeys(group_names))
        if not labels:
            problems.append((None, "no rows and no declared group_labels"))
    if problems:
        raise DataValidationError(problems)
    gindex = {g: i + 1 for i, g in enumerate(labels)}
    return SurveyDataset(
        ids=tuple(ids),
        outcomes=outcomes,
        groups=[gindex[g] for g in group_names],
        weights=weights,
        n_classes=schema.n_classes,
        group_labels=labels,
        covariates=np.array(covs, dtype=np.float64).reshape(len(ids), len(schema.covariates))
        if schema.covariates
        else None,
        covariate_names=schema.covariates,
    )


def default_schema(ds: SurveyDataset) -> DatasetSchema:
    names = ds.covariate_names or tuple(f"x{j + 1}" for j in range(ds.n_covariates))
    return DatasetSchema(
        outcome="outcome",
        group="group",
        weight="weight",
        n_classes=ds.n_classes,
        covariates=names,
        group_labels=ds.group_labels,
    )


def save_dataset(ds: SurveyDataset, path: str | Path, manifest_path: str | Path | None = None) -> DatasetSchema:
    """Write ``ds`` as CSV (floats in shortest round-trip form) and return its schema."""
    schema = default_schema(ds)
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([schema.id, schema.outcome, schema.group, schema.weight, *schema.covariates])
        for i, rid in enumerate(ds.ids):
            row = [rid, int(ds.outcomes[i]), ds.group_labels[ds.groups[i] - 1], repr(float(ds.weights[i]))]
            if ds.covariates is not None:
                row.extend(repr(float(v)) for v in ds.covariates[i])
            w.writerow(row)
    if manifest_path is not None:
        Path(manifest_path).write_text(json.dumps(schema.to_dict(), indent=2) + "\n")
    return schema


# ---------------------------------------------------------------------------
# Probability matrices


@dataclass(frozen=True, eq=False)
class ProbabilityMatrix:
    """Predicted class probabilities, one row per respondent id."""

    ids: tuple[str, ...]
    values: np.ndarray
    source_tag: str = ""
    _index: dict = field(default=None, init=False, repr=False)

    def __post_init__(self):
        ids = tuple(str(i) for i in self.ids)
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != len(ids):
            raise ValueError("values must be an (n_ids, K) array")
        if values.shape[1] < 2:
            raise ValueError("need at least two classes")
        if np.any(values < 0) or np.any(values > 1) or not np.all(np.isfinite(values)):
            bad = np.flatnonzero(np.any((values < 0) | (values > 1) | ~np.isfinite(values), axis=1))
            raise ValueError(f"probabilities outside [0, 1] for id {ids[bad[0]]!r}")
        dev = np.abs(values.sum(axis=1) - 1.0)
        if np.any(dev > PROB_SUM_TOL):
            bad = int(np.argmax(dev))
            raise ValueError(f"row for id {ids[bad]!r} sums to {values[bad].sum()!r}")
        index = {rid: i for i, rid in enumerate(ids)}
        if len(index) != len(ids):
            raise ValueError("duplicate ids in probability matrix")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "values", _readonly(values))
        object.__setattr__(self, "_index", index)

    @property
    def n_classes(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def rows_for(self, ids: Iterable[str]) -> np.ndarray:
        index = self._index
        try:
            pos = np.fromiter((index[str(i)] for i in ids), dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"no probability row for id {exc.args[0]!r}") from None
        return self.values[pos]

    def check_against(self, ds: SurveyDataset) -> None:
        if self.n_classes != ds.n_classes:
            raise ValueError(f"matrix has {self.n_classes} classes, dataset declares {ds.n_classes}")
        for rid in self.ids:
            if not ds.has_id(rid):
                raise KeyError(f"id {rid!r} in probability matrix is not in dataset")

    def save(self, path: str | Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", *(f"p{c + 1}" for c in range(self.n_classes))])
            for rid, row in zip(self.ids, self.values):
                w.writerow([rid, *(repr(float(v)) for v in row)])


# ---------------------------------------------------------------------------
# Group cross-tabulation


@dataclass(frozen=True)
class GroupTable:
    names: tuple[str, ...]
    counts: tuple[int, ...]
    weight_sums: tuple[float, ...]
    cal_counts: tuple[int, ...] | None = None

    def as_rows(self) -> list[dict]:
        rows = []
        for g, name in enumerate(self.names):
            row = {"group": name, "n": self.counts[g], "weight_sum": self.weight_sums[g]}
            if self.cal_counts is not None:
                row["n_cal"] = self.cal_counts[g]
            rows.append(row)
        return rows


def cross_tabulate(ds: SurveyDataset, split: "SplitAssignment | None" = None) -> GroupTable:
    G = ds.n_groups
    counts = np.bincount(ds.groups - 1, minlength=G)
    wsums = [math.fsum(ds.weights[ds.groups == g + 1]) for g in range(G)]
    cal = None
    if split is not None:
        from .splitter import Partition

        part = split.labels_for(ds)
        cal_groups = ds.groups[part == Partition.CAL]
        cal = tuple(int(c) for c in np.bincount(cal_groups - 1, minlength=G))
    return GroupTable(
        names=ds.group_labels,
        counts=tuple(int(c) for c in counts),
        weight_sums=tuple(wsums),
        cal_counts=cal,
    )
