"""Multi-split experiment runner.

One run = splits x models x methods. Each split is an independent task with
seeds derived from ``(master_seed, split_index)``, and results are merged in
split order, so the output bytes do not depend on the thread count.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .conformal import (
    DEFAULT_ALPHA,
    DEFAULT_LAMBDA,
    EmptyCalibrationWarning,
    Method,
    ThresholdSet,
    calibrate,
    predict_sets,
    score_calibration,
)
from .data import DatasetSchema, ProbabilityMatrix, SurveyDataset, load_dataset
from .evaluation import (
    Correlation,
    DiagnosticsReport,
    GroupDelta,
    Overconfidence,
    PairedDelta,
    SplitResult,
    cell_size_correlations,
    evaluate_split,
    extrema_concentration,
    group_deltas,
    overconfidence_by_group,
    paired_stats,
)
from .predictors import fit_ordered_logistic, fit_prior, ingest_probs, predict_probs
from .rng import derive_seed
from .splitter import (
    DEFAULT_FRACTIONS,
    GUARD_MIN,
    IntegrityReport,
    SplitAssignment,
    SplitIntegrityError,
    make_splits,
    verify_split,
)
from .synthetic import GeneratorConfig, generate

log = logging.getLogger(__name__)

BUILTIN_MODELS = ("prior", "ordered_logistic", "oracle")
PAIRED_METRICS = ("weighted_coverage", "weighted_gap", "weighted_size", "unweighted_coverage", "unweighted_gap", "unweighted_size")
HASH_EXCLUDE = ("HASH", "error.json")

DEFAULTS: dict[str, Any] = {
    "data": None,
    "generator": None,
    "n_splits": 100,
    "fractions": list(DEFAULT_FRACTIONS),
    "alpha": DEFAULT_ALPHA,
    "lambda": DEFAULT_LAMBDA,
    "methods": [m.value for m in Method],
    "models": ["prior", "ordered_logistic"],
    "covariates": None,
    "branch": {"tag": "primary"},
    "master_seed": 0,
    "min_cell_warn": 20,
    "threads": None,
    "force_nonempty": False,
    "independent_u_per_label": False,
    "split_index": 0,
    "mechanism": {"levels": [0.0, 1.5], "models": ["oracle", "prior"], "methods": ["STANDARD", "MONDRIAN"]},
}


@dataclass
class ExperimentConfig:
    data: dict | None = None
    generator: dict | None = None
    n_splits: int = 100
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS
    alpha: float = DEFAULT_ALPHA
    lam: float = DEFAULT_LAMBDA
    methods: tuple[str, ...] = tuple(m.value for m in Method)
    models: tuple = ("prior", "ordered_logistic")
    covariates: tuple[str, ...] | None = None
    branch: dict = field(default_factory=lambda: {"tag": "primary"})
    master_seed: int = 0
    min_cell_warn: int = 20
    threads: int | None = None
    force_nonempty: bool = False
    independent_u_per_label: bool = False
    split_index: int = 0
    mechanism: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS["mechanism"]))
    base_dir: Path = field(default_factory=Path.cwd, repr=False)

    def __post_init__(self):
        if (self.data is None) == (self.generator is None):
            raise ValueError("config needs exactly one of 'data' or 'generator'")
        self.fractions = tuple(float(f) for f in self.fractions)
        self.methods = tuple(Method(m).value for m in self.methods)
        if not self.methods:
            raise ValueError("no methods configured")
        if not self.models:
            raise ValueError("no models configured")
        for m in self.models:
            tag = m if isinstance(m, str) else m.get("tag")
            if isinstance(m, str) and m not in BUILTIN_MODELS:
                raise ValueError(f"unknown model {m!r}; external models need {{'tag', 'path'}}")
            if m == "oracle" and self.generator is None:
                raise ValueError("the 'oracle' model needs a generator config")
            if not isinstance(m, str) and not {"tag", "path"} <= set(m):
                raise ValueError(f"external model entry needs 'tag' and 'path': {m}")
            if not tag:
                raise ValueError("model tag must be non-empty")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.n_splits < 1:
            raise ValueError("n_splits must be >= 1")

    @classmethod
    def from_dict(cls, d: Mapping, base_dir: str | Path | None = None) -> "ExperimentConfig":
        unknown = set(d) - set(DEFAULTS)
        if unknown:
            raise ValueError(f"unknown config key(s): {sorted(unknown)}")
        merged = {**copy.deepcopy(DEFAULTS), **copy.deepcopy(dict(d))}
        merged["lam"] = merged.pop("lambda")
        merged["models"] = tuple(merged["models"])
        merged["methods"] = tuple(merged["methods"])
        if merged["covariates"] is not None:
            merged["covariates"] = tuple(merged["covariates"])
        mech = copy.deepcopy(DEFAULTS["mechanism"])
        mech.update(merged["mechanism"] or {})
        merged["mechanism"] = mech
        return cls(**merged, base_dir=Path(base_dir) if base_dir else Path.cwd())

    def to_dict(self) -> dict:
        return {
            "data": self.data,
            "generator": self.generator,
            "n_splits": self.n_splits,
            "fractions": list(self.fractions),
            "alpha": self.alpha,
            "lambda": self.lam,
            "methods": list(self.methods),
            "models": list(self.models),
            "covariates": None if self.covariates is None else list(self.covariates),
            "branch": self.branch,
            "master_seed": self.master_seed,
            "min_cell_warn": self.min_cell_warn,
            "threads": self.threads,
            "force_nonempty": self.force_nonempty,
            "independent_u_per_label": self.independent_u_per_label,
            "split_index": self.split_index,
            "mechanism": self.mechanism,
        }

    def model_tags(self) -> list[str]:
        return [m if isinstance(m, str) else m["tag"] for m in self.models]

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else self.base_dir / path


# ---------------------------------------------------------------------------
# Data preparation


def apply_branch(ds: SurveyDataset, probs: Mapping[str, ProbabilityMatrix], branch: Mapping) -> tuple[SurveyDataset, dict]:
    """Recode outcomes for a sensitivity branch.

    Directives: ``drop_outcomes`` (list of original classes), ``relabel``
    (original class -> new class), ``n_classes`` (new K) and ``drop_groups``
    (group labels). External probability matrices are collapsed along the same
    relabel map.
    """
    if not branch or set(branch) <= {"tag"}:
        return ds, dict(probs)
    keep = np.ones(ds.n, dtype=bool)
    drop_y = set(int(v) for v in branch.get("drop_outcomes", []))
    if drop_y:
        keep &= ~np.isin(ds.outcomes, list(drop_y))
    drop_g = set(branch.get("drop_groups", []))
    if drop_g:
        bad = [i + 1 for i, g in enumerate(ds.group_labels) if g in drop_g]
        keep &= ~np.isin(ds.groups, bad)
    K_new = int(branch.get("n_classes", ds.n_classes))
    relabel = {int(k): int(v) for k, v in branch.get("relabel", {}).items()}
    mapping = np.arange(ds.n_classes + 1)
    for old, new in relabel.items():
        mapping[old] = new
    rows = np.flatnonzero(keep)
    sub = ds.take(rows)
    out = SurveyDataset(
        ids=sub.ids,
        outcomes=mapping[sub.outcomes],
        groups=sub.groups,
        weights=sub.weights,
        n_classes=K_new,
        group_labels=sub.group_labels,
        covariates=sub.covariates,
        covariate_names=sub.covariate_names,
    )
    new_probs = {}
    for tag, pm in probs.items():
        kept = [i for i in pm.ids if out.has_id(i)]
        vals = pm.rows_for(kept)
        collapsed = np.zeros((len(kept), K_new))
        for c in range(ds.n_classes):
            if c + 1 in drop_y:
                continue
            collapsed[:, mapping[c + 1] - 1] += vals[:, c]
        collapsed /= collapsed.sum(axis=1, keepdims=True)
        new_probs[tag] = ProbabilityMatrix(tuple(kept), collapsed, pm.source_tag)
    return out, new_probs


def load_inputs(cfg: ExperimentConfig) -> tuple[SurveyDataset, dict[str, ProbabilityMatrix]]:
    fixed: dict[str, ProbabilityMatrix] = {}
    if cfg.generator is not None:
        ds, oracle, _ = generate(GeneratorConfig.from_dict(cfg.generator))
        if "oracle" in cfg.models:
            fixed["oracle"] = oracle
    else:
        d = cfg.data
        schema = d.get("schema")
        if schema is None:
            schema = DatasetSchema.load(cfg.resolve(d["schema_path"]))
        ds = load_dataset(cfg.resolve(d["path"]), schema)
    for m in cfg.models:
        if not isinstance(m, str):
            pm = ingest_probs(cfg.resolve(m["path"]), ds, m["tag"])
            fixed[m["tag"]] = pm
    ds, fixed = apply_branch(ds, fixed, cfg.branch)
    for tag, pm in fixed.items():
        missing = [i for i in ds.ids if i not in pm._index]
        if missing:
            raise KeyError(f"model {tag!r} has no probabilities for id {missing[0]!r}")
    return ds, fixed


# ---------------------------------------------------------------------------
# One split


@dataclass
class SplitOutput:
    split_index: int
    integrity: IntegrityReport
    results: list[SplitResult]
    thresholds: dict[tuple[str, str], ThresholdSet]
    overconfidence: dict[str, dict]
    model_meta: dict[str, dict]
    warnings: list[str]


def model_probs(entry, ds: SurveyDataset, split: SplitAssignment, fixed: Mapping[str, ProbabilityMatrix], covariates=None):
    tag = entry if isinstance(entry, str) else entry["tag"]
    ids = split.cal_ids + split.test_ids
    if tag in fixed:
        return tag, fixed[tag], {"source": "fixed"}
    if tag == "prior":
        model = fit_prior(ds, split.train_ids)
        return tag, predict_probs(model, ds, ids, tag), {"class_frequencies": model.class_frequencies.tolist()}
    if tag == "ordered_logistic":
        model = fit_ordered_logistic(ds, split.train_ids, covariates=None if covariates is None else list(covariates))
        meta = model.to_dict()["fit_meta"]
        return tag, predict_probs(model, ds, ids, tag), meta
    raise ValueError(f"no probabilities for model {tag!r}")


def run_split(cfg: ExperimentConfig, ds: SurveyDataset, split: SplitAssignment, fixed: Mapping[str, ProbabilityMatrix]) -> SplitOutput:
    integrity = verify_split(ds, split)
    if not integrity.ok:
        raise SplitIntegrityError(f"split {split.split_index} failed integrity: {integrity.to_dict()}")
    notes = []
    if integrity.min_cal_cell < cfg.min_cell_warn:
        notes.append(
            f"split {split.split_index}: calibration cell {integrity.min_cal_group!r} has {integrity.min_cal_cell} < {cfg.min_cell_warn}"
        )
    seed = derive_seed(cfg.master_seed, "u", split.split_index)
    groups = range(1, ds.n_groups + 1)
    results, thresholds, over, meta = [], {}, {}, {}
    for entry in cfg.models:
        tag, probs, m = model_probs(entry, ds, split, fixed, cfg.covariates)
        meta[tag] = m
        scores = score_calibration(probs, ds, split.cal_ids, seed)
        for method in cfg.methods:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", EmptyCalibrationWarning)
                ts = calibrate(scores, method, cfg.alpha, cfg.lam, groups=groups)
            notes.extend(f"split {split.split_index} {tag} {method}: {n}" for n in ts.notes)
            sets = predict_sets(
                probs, ts, ds, split.test_ids, seed,
                force_nonempty=cfg.force_nonempty,
                independent_u_per_label=cfg.independent_u_per_label,
            )
            results.append(evaluate_split(sets, ds, split.split_index, method, tag, ts))
            thresholds[(tag, method)] = ts
        over[tag] = overconfidence_by_group(probs, None, ds, split.test_ids)
    return SplitOutput(split.split_index, integrity, results, thresholds, over, meta, notes)


# ---------------------------------------------------------------------------
# Aggregation


def _f(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "+inf" if x > 0 else "-inf"
    return repr(x)


def _csv(header: Sequence[str], rows: Sequence[Sequence]) -> bytes:
    lines = [",".join(header)]
    for r in rows:
        lines.append(",".join(v if isinstance(v, str) else _f(v) for v in r))
    return ("\n".join(lines) + "\n").encode()


def _json(obj) -> bytes:
    def default(o):
        if isinstance(o, np.generic):
            return o.item()
        raise TypeError(type(o))

    def clean(o):
        if isinstance(o, float):
            if math.isinf(o):
                return "+inf" if o > 0 else "-inf"
            if math.isnan(o):
                return None
        if isinstance(o, dict):
            return {str(k): clean(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [clean(v) for v in o]
        return o

    return (json.dumps(clean(obj), indent=2, sort_keys=True, default=default) + "\n").encode()


def _mean(xs):
    xs = [x for x in xs if x is not None and not math.isnan(x)]
    return math.fsum(xs) / len(xs) if xs else math.nan


def _sd(xs):
    xs = [x for x in xs if x is not None and not math.isnan(x)]
    if len(xs) < 2:
        return math.nan
    m = math.fsum(xs) / len(xs)
    return math.sqrt(math.fsum((x - m) ** 2 for x in xs) / (len(xs) - 1))


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    results: list[SplitResult]
    summary: list[dict]
    group_summary: list[dict]
    paired: list[tuple[str, str, str, PairedDelta]] | None
    paired_note: str | None
    diagnostics: DiagnosticsReport
    integrity: dict
    files: dict[str, bytes]
    content_hash: str
    group_labels: tuple[str, ...]

    def mean(self, model: str, method: str, metric: str) -> float:
        for row in self.summary:
            if row["model"] == model and row["method"] == method:
                return row[metric]
        raise KeyError((model, method))

    def write(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for rel, data in self.files.items():
            p = out / rel
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_bytes(data)
        (out / "HASH").write_text(self.content_hash + "\n")
        return out


def content_hash(files: Mapping[str, bytes]) -> str:
    h = hashlib.sha256()
    for rel in sorted(files):
        if rel in HASH_EXCLUDE or rel.startswith("report/"):
            continue
        h.update(rel.encode() + b"\0")
        h.update(hashlib.sha256(files[rel]).digest())
    return h.hexdigest()


def directory_hash(out_dir: str | Path) -> str:
    out = Path(out_dir)
    files = {p.relative_to(out).as_posix(): p.read_bytes() for p in out.rglob("*") if p.is_file()}
    return content_hash(files)


def _mondrian_diagnostics(outputs: Sequence[SplitOutput], tags: Sequence[str], methods: Sequence[str], alpha: float, diag: DiagnosticsReport, label_prefix: str = "") -> dict[str, list[list[GroupDelta]]]:
    per_model: dict[str, list[list[GroupDelta]]] = {}
    if Method.STANDARD.value not in methods:
        return per_model
    for alt in (Method.MONDRIAN.value, Method.REG_MONDRIAN.value):
        if alt not in methods:
            continue
        for tag in tags:
            per_split = []
            for out in outputs:
                res = {(r.model_tag, r.method): r for r in out.results}
                per_split.append(group_deltas(res[(tag, Method.STANDARD.value)], res[(tag, alt)], alpha))
            key = f"{label_prefix}{tag}:{alt}"
            diag.extrema_counts[key] = extrema_concentration(per_split)
            if alt == Method.MONDRIAN.value:
                per_model[f"{label_prefix}{tag}"] = per_split
            obs = [d for split in per_split for d in split]
            for metric, fn in (
                ("delta_set_size", lambda d: d.size_delta),
                ("delta_coverage", lambda d: d.coverage_delta),
                ("abs_delta_set_size", lambda d: abs(d.size_delta)),
                ("abs_delta_coverage", lambda d: abs(d.coverage_delta)),
            ):
                pairs = [(d.n_cal, fn(d)) for d in obs]
                try:
                    diag.correlations[(key, metric)] = cell_size_correlations(pairs)
                except ValueError:
                    log.info("correlation %s/%s undefined (degenerate variance)", key, metric)
    return per_model


def aggregate(cfg: ExperimentConfig, ds: SurveyDataset, splits: Sequence[SplitAssignment], outputs: Sequence[SplitOutput], label_prefix: str = "") -> ExperimentReport:
    tags = cfg.model_tags()
    labels = ds.group_labels
    results = [r for out in outputs for r in out.results]

    summary = []
    for tag in tags:
        for method in cfg.methods:
            rs = [r for r in results if r.model_tag == tag and r.method == method]
            row = {"model": tag, "method": method, "n_splits": len(rs)}
            for m in SplitResult.METRICS:
                row[m] = _mean([getattr(r, m) for r in rs])
                row[m + "_sd"] = _sd([getattr(r, m) for r in rs])
            row["n_empty"] = sum(r.n_empty for r in rs)
            summary.append(row)

    group_summary = []
    for tag in tags:
        for method in cfg.methods:
            rs = [r for r in results if r.model_tag == tag and r.method == method]
            for g in range(1, ds.n_groups + 1):
                gm = [r.per_group[g] for r in rs if g in r.per_group]
                group_summary.append({
                    "model": tag, "method": method, "group": labels[g - 1],
                    "n_splits_present": len(gm),
                    "weighted_coverage": _mean([x.weighted_coverage for x in gm]),
                    "weighted_size": _mean([x.weighted_size for x in gm]),
                    "threshold": _mean([x.threshold for x in gm if math.isfinite(x.threshold)]),
                    "n_cal": _mean([x.n_cal for x in gm]),
                    "n_test": _mean([x.n_test for x in gm]),
                })

    paired, paired_note = None, None
    if len(outputs) < 2:
        paired_note = "paired statistics need at least 2 splits (R<2)"
    elif Method.STANDARD.value not in cfg.methods:
        paired_note = "paired statistics need the STANDARD method as reference"
    else:
        paired = []
        for tag in tags:
            ref = {r.split_index: r for r in results if r.model_tag == tag and r.method == Method.STANDARD.value}
            order = sorted(ref)
            for method in cfg.methods:
                if method == Method.STANDARD.value:
                    continue
                alt = {r.split_index: r for r in results if r.model_tag == tag and r.method == method}
                for metric in PAIRED_METRICS:
                    pd_ = paired_stats([getattr(ref[i], metric) for i in order], [getattr(alt[i], metric) for i in order], metric)
                    paired.append((tag, method, metric, pd_))

    diag = DiagnosticsReport(n_splits=len(outputs), group_labels=labels)
    for tag in tags:
        per_group: dict[int, list] = {}
        for out in outputs:
            for g, o in out.overconfidence[tag].items():
                per_group.setdefault(g, []).append(o)
        diag.overconfidence[f"{label_prefix}{tag}"] = {
            g: Overconfidence(_mean([o.accuracy for o in os_]), _mean([o.confidence for o in os_]), _mean([o.overconfidence for o in os_]))
            for g, os_ in sorted(per_group.items())
        }
    _mondrian_diagnostics(outputs, tags, cfg.methods, cfg.alpha, diag, label_prefix)

    # REG_MONDRIAN thresholds must sit between MONDRIAN and STANDARD
    coherence_violations = 0
    methods = set(cfg.methods)
    if {"STANDARD", "MONDRIAN", "REG_MONDRIAN"} <= methods:
        for out in outputs:
            for tag in tags:
                std = out.thresholds[(tag, "STANDARD")].global_q
                mon = out.thresholds[(tag, "MONDRIAN")].per_group_q
                reg = out.thresholds[(tag, "REG_MONDRIAN")].per_group_q
                for g, q in reg.items():
                    if math.isfinite(q) and math.isfinite(mon[g]) and math.isfinite(std):
                        lo, hi = sorted((mon[g], std))
                        if not lo - 1e-12 <= q <= hi + 1e-12:
                            coherence_violations += 1

    integ_rows = [o.integrity.to_dict() for o in outputs]
    warn_notes = [w for o in outputs for w in o.warnings]
    integrity = {
        "n_splits": len(outputs),
        "all_ok": all(r["ok"] for r in integ_rows),
        "all_disjoint": all(r["disjoint"] for r in integ_rows),
        "max_assignments": max(r["max_assignments"] for r in integ_rows),
        "sizes": sorted({tuple(r["sizes"]) for r in integ_rows}),
        "min_cal_cell": min(r["min_cal_cell"] for r in integ_rows),
        "min_cell_warn": cfg.min_cell_warn,
        "min_cell_warnings": [w for w in warn_notes if "calibration cell" in w],
        "calibration_notes": [w for w in warn_notes if "calibration cell" not in w],
        "reg_mondrian_coherence_violations": coherence_violations,
        "splits": integ_rows,
    }

    files = render_files(cfg, ds, splits, outputs, results, summary, group_summary, paired, paired_note, diag, integrity)
    return ExperimentReport(cfg, results, summary, group_summary, paired, paired_note, diag, integrity, files, content_hash(files), labels)


def render_files(cfg, ds, splits, outputs, results, summary, group_summary, paired, paired_note, diag, integrity) -> dict[str, bytes]:
    labels = ds.group_labels
    files: dict[str, bytes] = {}
    # thread count is an execution detail and stays out of the hashed outputs
    files["config.json"] = _json({k: v for k, v in cfg.to_dict().items() if k != "threads"})
    rows = [(rid, s.split_index, p.name) for s in splits for rid, p in s.assignment.items()]
    files["splits.csv"] = _csv(["id", "split_index", "partition"], rows)
    files["splits.json"] = _json({
        "master_seed": cfg.master_seed,
        "fractions": list(cfg.fractions),
        "guard": {"joint_stratum_min": GUARD_MIN, "group_fallback_min": GUARD_MIN, "pool": "global"},
        "size_rule": "round(n*f_tr), round(n*f_cal), remainder",
        "splits": [{"split_index": s.split_index, "seed": s.seed} for s in splits],
    })
    for out in outputs:
        for (tag, method), ts in out.thresholds.items():
            d = ts.to_dict(labels)
            d.update({"model": tag, "split_index": out.split_index})
            files[f"thresholds/{tag}/{method}_split{out.split_index:03d}.json"] = _json(d)
    files["results.csv"] = _csv(
        ["split_index", "model", "method", *SplitResult.METRICS, "n_empty"],
        [[r.split_index, r.model_tag, r.method, *(getattr(r, m) for m in SplitResult.METRICS), r.n_empty] for r in results],
    )
    files["group_results.csv"] = _csv(
        ["split_index", "model", "method", "group", "n_cal", "n_test", "weighted_coverage", "weighted_size", "unweighted_coverage", "unweighted_size", "threshold"],
        [
            [r.split_index, r.model_tag, r.method, labels[g - 1], gm.n_cal, gm.n_test, gm.weighted_coverage, gm.weighted_size, gm.unweighted_coverage, gm.unweighted_size, gm.threshold]
            for r in results
            for g, gm in sorted(r.per_group.items())
        ],
    )
    metric_cols = [c for m in SplitResult.METRICS for c in (m, m + "_sd")]
    files["summary.csv"] = _csv(
        ["model", "method", "n_splits", *metric_cols, "n_empty"],
        [[s["model"], s["method"], s["n_splits"], *(s[c] for c in metric_cols), s["n_empty"]] for s in summary],
    )
    files["group_summary.csv"] = _csv(
        ["model", "method", "group", "n_splits_present", "n_cal", "n_test", "weighted_coverage", "weighted_size", "threshold"],
        [[g["model"], g["method"], g["group"], g["n_splits_present"], g["n_cal"], g["n_test"], g["weighted_coverage"], g["weighted_size"], g["threshold"]] for g in group_summary],
    )
    header = ["model", "comparison", "metric", "n_splits", "delta", "ci_lo", "ci_hi", "se", "sd", "cohens_dz"]
    if paired is None:
        files["paired.csv"] = _csv(header, [])
    else:
        files["paired.csv"] = _csv(
            header,
            [[tag, f"{method}-STANDARD", metric, p.n, p.mean, p.ci95[0], p.ci95[1], p.se, p.sd, "undefined" if p.cohens_dz is None else p.cohens_dz] for tag, method, metric, p in paired],
        )
    diag_d = diag.to_dict()
    diag_d["paired_note"] = paired_note
    files["diagnostics.json"] = _json(diag_d)
    files["integrity.json"] = _json(integrity)
    return files


# ---------------------------------------------------------------------------
# Entry points


def _threads(cfg: ExperimentConfig) -> int:
    n = cfg.threads or 1
    env = os.environ.get("CONFORMAL_AUDIT_THREADS")
    if env:
        n = min(n, int(env)) if cfg.threads else int(env)
    return max(1, n)


def run_splits(cfg: ExperimentConfig, ds: SurveyDataset, fixed, splits) -> list[SplitOutput]:
    n_threads = _threads(cfg)
    if n_threads == 1:
        return [run_split(cfg, ds, s, fixed) for s in splits]
    with ThreadPoolExecutor(max_workers=n_threads) as pool:
        return list(pool.map(lambda s: run_split(cfg, ds, s, fixed), splits))


def run_experiment(config: ExperimentConfig | Mapping, out_dir: str | Path | None = None) -> ExperimentReport:
    """Run every split, aggregate, and optionally write the output directory."""
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.from_dict(config)
    ds, fixed = load_inputs(cfg)
    splits = make_splits(ds, cfg.n_splits, cfg.fractions, cfg.master_seed)
    outputs = run_splits(cfg, ds, fixed, splits)
    report = aggregate(cfg, ds, splits, outputs)
    for w in report.integrity["min_cell_warnings"][:5]:
        log.warning(w)
    if out_dir is not None:
        report.write(out_dir)
    return report


@dataclass
class MechanismReport:
    diagnostics: DiagnosticsReport
    levels: list[float]
    deltas: dict[str, list[list[GroupDelta]]]
    group_labels: tuple[str, ...]
    files: dict[str, bytes] = field(default_factory=dict)

    def correlation(self, level: float, model: str, metric: str = "abs_delta_set_size") -> Correlation:
        return self.diagnostics.correlations[(f"inf={level:g}/{model}:MONDRIAN", metric)]

    def extrema(self, level: float, model: str, mode: str = "set_size_inflation") -> dict[int, int]:
        return self.diagnostics.extrema_counts[f"inf={level:g}/{model}:MONDRIAN"][mode]


def mechanism_study(config: ExperimentConfig | Mapping, out_dir: str | Path | None = None) -> MechanismReport:
    """MONDRIAN-vs-STANDARD perturbations across predictor-informativeness levels.

    For each level in ``config.mechanism["levels"]`` the generator is re-run
    with that informativeness and every model in ``mechanism["models"]`` is
    evaluated on the same splits.
    """
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.from_dict(config)
    if cfg.generator is None:
        raise ValueError("mechanism study needs a generator config")
    mech = cfg.mechanism
    levels = [float(v) for v in mech["levels"]]
    diag = DiagnosticsReport(n_splits=cfg.n_splits)
    all_deltas: dict[str, list[list[GroupDelta]]] = {}
    labels: tuple[str, ...] = ()
    for level in levels:
        gen = dict(cfg.generator)
        gen["informativeness"] = level
        sub = ExperimentConfig.from_dict(
            {**cfg.to_dict(), "generator": gen, "models": list(mech["models"]), "methods": list(mech["methods"])},
            cfg.base_dir,
        )
        ds, fixed = load_inputs(sub)
        labels = ds.group_labels
        splits = make_splits(ds, sub.n_splits, sub.fractions, sub.master_seed)
        outputs = run_splits(sub, ds, fixed, splits)
        prefix = f"inf={level:g}/"
        all_deltas.update(_mondrian_diagnostics(outputs, sub.model_tags(), sub.methods, sub.alpha, diag, prefix))
        for tag in sub.model_tags():
            per_group: dict[int, list] = {}
            for out in outputs:
                for g, o in out.overconfidence[tag].items():
                    per_group.setdefault(g, []).append(o.overconfidence)
                diag.overconfidence[prefix + tag] = {g: Overconfidence(math.nan, math.nan, _mean(v)) for g, v in sorted(per_group.items())}
    diag.group_labels = labels
    rep = MechanismReport(diag, levels, all_deltas, labels)
    d = diag.to_dict()
    d["levels"] = levels
    rep.files["diagnostics.json"] = _json(d)
    rep.files["mechanism_deltas.csv"] = _csv(
        ["key", "split", "group", "n_cal", "delta_set_size", "delta_coverage", "delta_coverage_error"],
        [
            [key, r, labels[d.group - 1], d.n_cal, d.size_delta, d.coverage_delta, d.coverage_error_delta]
            for key, per_split in sorted(all_deltas.items())
            for r, split in enumerate(per_split)
            for d in split
        ],
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for rel, data in rep.files.items():
            (out / rel).write_bytes(data)
    return rep
