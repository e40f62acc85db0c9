"""Respondent-disjoint train/calibration/test splits with guarded stratification.

Strata are outcome x group cells. A cell with fewer than ``GUARD_MIN`` members
is folded into a per-group fallback stratum, and fallback strata that are
still too small go into one global pool. Partition totals follow the fixed
size rule ``round(n f_tr), round(n f_cal), rest``; per-stratum counts are the
floors of the proportional quotas plus leftover units assigned by a min-cost
flow that favours the largest fractional remainders.
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Sequence

import networkx as nx
import numpy as np

from .data import SurveyDataset
from .rng import derive_seed, generator

GUARD_MIN = 3
DEFAULT_FRACTIONS = (0.4, 0.3, 0.3)


class Partition(IntEnum):
    TRAIN = 0
    CAL = 1
    TEST = 2


class SplitIntegrityError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class SplitAssignment:
    split_index: int
    seed: int
    assignment: dict[str, Partition]
    fractions: tuple[float, float, float]
    _cache: dict = field(default_factory=dict, init=False, repr=False)

    def ids_in(self, part: Partition) -> list[str]:
        key = ("ids", int(part))
        if key not in self._cache:
            self._cache[key] = [i for i, p in self.assignment.items() if p == part]
        return self._cache[key]

    @property
    def train_ids(self) -> list[str]:
        return self.ids_in(Partition.TRAIN)

    @property
    def cal_ids(self) -> list[str]:
        return self.ids_in(Partition.CAL)

    @property
    def test_ids(self) -> list[str]:
        return self.ids_in(Partition.TEST)

    def sizes(self) -> tuple[int, int, int]:
        counts = [0, 0, 0]
        for p in self.assignment.values():
            counts[p] += 1
        return tuple(counts)

    def labels_for(self, ds: SurveyDataset) -> np.ndarray:
        """Partition code per dataset row (``-1`` where the id is unassigned)."""
        return np.fromiter((self.assignment.get(i, -1) for i in ds.ids), dtype=np.int64, count=ds.n)


def partition_sizes(n: int, fractions: Sequence[float]) -> tuple[int, int, int]:
    n_tr = math.floor(n * fractions[0] + 0.5)
    n_cal = math.floor(n * fractions[1] + 0.5)
    return n_tr, n_cal, n - n_tr - n_cal


def split_seed(master_seed: int, split_index: int) -> int:
    return derive_seed(master_seed, 0x5B17, split_index)


def _check_fractions(fractions: Sequence[float]) -> tuple[float, float, float]:
    if len(fractions) != 3:
        raise ValueError("fractions must be a (train, cal, test) triple")
    f = tuple(float(x) for x in fractions)
    if any(x <= 0 for x in f):
        raise ValueError(f"every fraction must be positive, got {f}")
    if abs(math.fsum(f) - 1.0) > 1e-12:
        raise ValueError(f"fractions must sum to 1 within 1e-12, got {math.fsum(f)!r}")
    return f


def guarded_strata(ds: SurveyDataset, guard_min: int = GUARD_MIN) -> list[np.ndarray]:
    """Row-index arrays for each stratum after the small-cell guard."""
    cells: dict[tuple[int, int], list[int]] = defaultdict(list)
    for i, (y, g) in enumerate(zip(ds.outcomes.tolist(), ds.groups.tolist())):
        cells[(g, y)].append(i)
    strata: list[list[int]] = []
    fallback: dict[int, list[int]] = defaultdict(list)
    for (g, _y), rows in sorted(cells.items()):
        if len(rows) >= guard_min:
            strata.append(rows)
        else:
            fallback[g].extend(rows)
    pool: list[int] = []
    for g in sorted(fallback):
        if len(fallback[g]) >= guard_min:
            strata.append(sorted(fallback[g]))
        else:
            pool.extend(fallback[g])
    if pool:
        strata.append(sorted(pool))
    return [np.array(s, dtype=np.int64) for s in strata]


def apportion(
    stratum_sizes: Sequence[int],
    fractions: Sequence[float],
    totals: Sequence[int],
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Integer (stratum x partition) counts with row sums ``stratum_sizes`` and
    column sums ``totals``.

    Entries are floors or ceilings of their proportional quotas (one less only
    when a rounded total forces it). Leftover units
    go to the cells with the largest fractional remainders, subject to both
    margins; ``rng`` only breaks ties among equal remainders.
    """
    sizes = np.asarray(stratum_sizes, dtype=np.int64)
    f = np.asarray(fractions, dtype=np.float64)
    quotas = sizes[:, None] * f[None, :]
    base = np.floor(quotas + 1e-12).astype(np.int64)
    base = np.minimum(base, sizes[:, None])
    rem = quotas - base
    col_need = np.asarray(totals, dtype=np.int64) - base.sum(axis=0)
    # a total rounded below its floored quotas: drop units with the smallest remainders
    for p in np.flatnonzero(col_need < 0):
        order = np.lexsort((np.arange(len(sizes)), rem[:, p], base[:, p] <= 1))
        for s in order[base[order, p] > 0][: -col_need[p]]:
            base[s, p] -= 1
            rem[s, p] += 1.0
        col_need[p] = 0
    row_need = sizes - base.sum(axis=1)
    if row_need.sum() != col_need.sum():
        raise ValueError("stratum sizes and partition totals disagree")
    if row_need.sum() == 0:
        return base

    graph = nx.DiGraph()
    graph.add_node("src", demand=-int(row_need.sum()))
    graph.add_node("sink", demand=int(col_need.sum()))
    jitter = rng.integers(0, 1000, size=rem.shape) if rng is not None else np.zeros(rem.shape, dtype=np.int64)
    for s in np.flatnonzero(row_need):
        graph.add_edge("src", ("s", int(s)), capacity=int(row_need[s]), weight=0)
        for p in range(len(f)):
            if col_need[p] > 0:
                cost = -int(round(min(rem[s, p], 1.0) * 1e6)) * 1000 - int(jitter[s, p])
                graph.add_edge(("s", int(s)), ("p", p), capacity=1, weight=cost)
    for p in range(len(f)):
        if col_need[p] > 0:
            graph.add_edge(("p", p), "sink", capacity=int(col_need[p]), weight=0)
    flow = nx.min_cost_flow(graph)
    out = base.copy()
    for s in np.flatnonzero(row_need):
        for node, units in flow[("s", int(s))].items():
            out[s, node[1]] += units
    return out


def _one_split(ds: SurveyDataset, split_index: int, fractions, master_seed: int, strata) -> SplitAssignment:
    seed = split_seed(master_seed, split_index)
    rng = generator(seed)
    totals = partition_sizes(ds.n, fractions)
    counts = apportion([len(s) for s in strata], fractions, totals, rng)
    part = np.empty(ds.n, dtype=np.int64)
    for rows, c in zip(strata, counts):
        shuffled = rng.permutation(rows)
        cut1, cut2 = c[0], c[0] + c[1]
        part[shuffled[:cut1]] = Partition.TRAIN
        part[shuffled[cut1:cut2]] = Partition.CAL
        part[shuffled[cut2:]] = Partition.TEST
    assignment = {rid: Partition(int(p)) for rid, p in zip(ds.ids, part)}
    return SplitAssignment(split_index, seed, assignment, tuple(fractions))


def make_splits(
    ds: SurveyDataset,
    n_splits: int,
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    master_seed: int = 0,
    start_index: int = 0,
) -> list[SplitAssignment]:
    """Deterministic stratified splits; split ``r`` depends only on ``(ds, r, master_seed)``."""
    fractions = _check_fractions(fractions)
    if ds.n < 3:
        raise ValueError(f"need at least 3 respondents to split, got {ds.n}")
    if n_splits < 1:
        raise ValueError("n_splits must be >= 1")
    strata = guarded_strata(ds)
    return [_one_split(ds, r, fractions, master_seed, strata) for r in range(start_index, start_index + n_splits)]


@dataclass
class IntegrityReport:
    split_index: int
    disjoint: bool
    sizes: tuple[int, int, int]
    expected_sizes: tuple[int, int, int]
    max_assignments: int
    min_cal_cell: int
    min_cal_group: str | None
    duplicated_ids: list[str] = field(default_factory=list)
    unassigned_ids: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return (
            self.disjoint
            and self.max_assignments == 1
            and not self.unassigned_ids
            and self.sizes == self.expected_sizes
        )

    def to_dict(self) -> dict:
        return {
            "split_index": self.split_index,
            "ok": self.ok,
            "disjoint": self.disjoint,
            "sizes": list(self.sizes),
            "expected_sizes": list(self.expected_sizes),
            "max_assignments": self.max_assignments,
            "min_cal_cell": self.min_cal_cell,
            "min_cal_group": self.min_cal_group,
            "duplicated_ids": self.duplicated_ids[:20],
            "unassigned_ids": self.unassigned_ids[:20],
        }


def verify_split(
    ds: SurveyDataset,
    split: SplitAssignment | Iterable[tuple[str, Partition]],
    split_index: int | None = None,
    fractions: Sequence[float] | None = None,
) -> IntegrityReport:
    """Check disjointness, sizes and calibration-cell counts.

    ``split`` may also be a raw iterable of ``(id, partition)`` pairs, which is
    how a corrupted assignment (one id listed twice) can be inspected.
    """
    if isinstance(split, SplitAssignment):
        pairs = list(split.assignment.items())
        split_index = split.split_index if split_index is None else split_index
        fractions = split.fractions if fractions is None else fractions
    else:
        pairs = list(split)
    fractions = DEFAULT_FRACTIONS if fractions is None else fractions

    seen: dict[str, int] = defaultdict(int)
    for rid, _p in pairs:
        if not ds.has_id(rid):
            raise KeyError(f"id {rid!r} in split is not in dataset")
        seen[rid] += 1
    dup = sorted(rid for rid, c in seen.items() if c > 1)
    unassigned = [rid for rid in ds.ids if rid not in seen]
    sizes = [0, 0, 0]
    for _rid, p in pairs:
        sizes[int(p)] += 1

    G = ds.n_groups
    cal_counts = np.zeros(G, dtype=np.int64)
    cal_seen = set()
    for rid, p in pairs:
        if p == Partition.CAL and rid not in cal_seen:
            cal_seen.add(rid)
            cal_counts[ds.groups[ds.rows([rid])[0]] - 1] += 1
    present = np.bincount(ds.groups - 1, minlength=G) > 0
    if present.any():
        g_min = int(np.flatnonzero(present)[np.argmin(cal_counts[present])])
        min_cell, min_group = int(cal_counts[g_min]), ds.group_labels[g_min]
    else:
        min_cell, min_group = 0, None
    return IntegrityReport(
        split_index=-1 if split_index is None else split_index,
        disjoint=not dup,
        sizes=tuple(sizes),
        expected_sizes=partition_sizes(ds.n, fractions),
        max_assignments=max(seen.values(), default=0),
        min_cal_cell=min_cell,
        min_cal_group=min_group,
        duplicated_ids=dup,
        unassigned_ids=unassigned,
    )


def save_splits(splits: Sequence[SplitAssignment], csv_path: str | Path, sidecar_path: str | Path | None = None, master_seed: int | None = None) -> None:
    with Path(csv_path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "split_index", "partition"])
        for s in splits:
            for rid, p in s.assignment.items():
                w.writerow([rid, s.split_index, p.name])
    if sidecar_path is not None:
        meta = {
            "master_seed": master_seed,
            "fractions": list(splits[0].fractions) if splits else list(DEFAULT_FRACTIONS),
            "guard": {"joint_stratum_min": GUARD_MIN, "group_fallback_min": GUARD_MIN, "pool": "global"},
            "size_rule": "round(n*f_tr), round(n*f_cal), remainder",
            "splits": [{"split_index": s.split_index, "seed": s.seed} for s in splits],
        }
        Path(sidecar_path).write_text(json.dumps(meta, indent=2) + "\n")


def load_splits(csv_path: str | Path, sidecar_path: str | Path | None = None) -> list[SplitAssignment]:
    meta = json.loads(Path(sidecar_path).read_text()) if sidecar_path else {}
    seeds = {s["split_index"]: s["seed"] for s in meta.get("splits", [])}
    fractions = tuple(meta.get("fractions", DEFAULT_FRACTIONS))
    by_split: dict[int, dict[str, Partition]] = defaultdict(dict)
    with Path(csv_path).open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            by_split[int(row["split_index"])][row["id"]] = Partition[row["partition"]]
    return [SplitAssignment(r, seeds.get(r, 0), by_split[r], fractions) for r in sorted(by_split)]
