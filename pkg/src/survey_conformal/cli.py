"""Command-line driver.

Usage::

    survey-conformal SUBCOMMAND --config CONFIG.json --out DIR [--override K=V ...] [--seed N] [--quiet]

Exit codes: 0 success, 1 usage or configuration error, 2 integrity or
verification failure. Errors are also written to ``DIR/error.json``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
import warnings
from pathlib import Path

from . import harness
from .conformal import EmptyCalibrationWarning, calibrate, predict_sets, score_calibration
from .data import DataValidationError, cross_tabulate
from .evaluation import evaluate_split
from .harness import DEFAULTS, ExperimentConfig, _csv, _json
from .predictors import SeparationError, fit_ordered_logistic, fit_prior, predict_probs
from .report import format_summary, render
from .rng import derive_seed
from .splitter import SplitIntegrityError, make_splits, verify_split

SUBCOMMANDS = ("validate", "split", "fit", "calibrate", "audit", "experiment", "mechanism", "report")

EXIT_OK, EXIT_USAGE, EXIT_INTEGRITY = 0, 1, 2


class UsageError(Exception):
    pass


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply ``key=value`` overrides; dotted keys reach into nested objects.

    The top-level key must be a known configuration key.
    """
    doc = json.loads(json.dumps(doc))
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override must look like KEY=VALUE: {item!r}")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        if parts[0] not in DEFAULTS:
            raise UsageError(f"unknown override key {parts[0]!r}")
        target = doc
        for p in parts[:-1]:
            if target.get(p) is None:
                target[p] = json.loads(json.dumps(DEFAULTS.get(p) or {})) if target is doc else {}
            target = target[p]
            if not isinstance(target, dict):
                raise UsageError(f"cannot override inside non-object key {key!r}")
        target[parts[-1]] = parse_value(raw)
    return doc


def load_config(args) -> ExperimentConfig:
    if args.config is None:
        raise UsageError("--config is required")
    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}") from exc
    doc = apply_overrides(doc, args.override)
    if args.seed is not None:
        doc["master_seed"] = args.seed
    try:
        return ExperimentConfig.from_dict(doc, base_dir=path.parent)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc


def _write(out: Path, files: dict[str, bytes]) -> None:
    for rel, data in files.items():
        p = out / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(data)


def _split_for(cfg: ExperimentConfig, ds):
    split = make_splits(ds, 1, cfg.fractions, cfg.master_seed, start_index=cfg.split_index)[0]
    report = verify_split(ds, split)
    if not report.ok:
        raise SplitIntegrityError(f"split {split.split_index} failed integrity: {report.to_dict()}")
    return split, report


# ---------------------------------------------------------------------------
# Subcommands


def cmd_validate(cfg, out: Path, quiet: bool) -> int:
    ds, fixed = harness.load_inputs(cfg)
    table = cross_tabulate(ds)
    rows = [[name, n, w] for name, n, w in zip(table.names, table.counts, table.weight_sums)]
    _write(out, {
        "group_table.csv": _csv(["group", "n", "weight_sum"], rows),
        "validation.json": _json({"ok": True, "n": ds.n, "n_classes": ds.n_classes, "n_groups": ds.n_groups, "models_ingested": sorted(fixed)}),
    })
    if not quiet:
        print(f"dataset ok: n={ds.n}, K={ds.n_classes}, groups={ds.n_groups}")
        for name, n, w in rows:
            print(f"  {name:<24} n={n:<6d} weight={w:.3f}")
    return EXIT_OK


def cmd_split(cfg, out: Path, quiet: bool) -> int:
    ds, _ = harness.load_inputs(cfg)
    splits = make_splits(ds, cfg.n_splits, cfg.fractions, cfg.master_seed)
    reports = [verify_split(ds, s) for s in splits]
    files = {
        "splits.csv": _csv(["id", "split_index", "partition"], [(rid, s.split_index, p.name) for s in splits for rid, p in s.assignment.items()]),
        "splits.json": _json({"master_seed": cfg.master_seed, "fractions": list(cfg.fractions), "splits": [{"split_index": s.split_index, "seed": s.seed} for s in splits]}),
        "integrity.json": _json({"all_ok": all(r.ok for r in reports), "splits": [r.to_dict() for r in reports]}),
    }
    _write(out, files)
    bad = [r.split_index for r in reports if not r.ok]
    if bad:
        raise SplitIntegrityError(f"integrity failure in split(s) {bad}")
    if not quiet:
        print(f"{len(splits)} split(s), sizes {splits[0].sizes()}, all disjoint")
    return EXIT_OK


def _fit_models(cfg, ds, fixed, split):
    out = {}
    for entry in cfg.models:
        tag, probs, meta = harness.model_probs(entry, ds, split, fixed, cfg.covariates)
        out[tag] = (probs, meta)
    return out


def cmd_fit(cfg, out: Path, quiet: bool) -> int:
    ds, fixed = harness.load_inputs(cfg)
    split, _ = _split_for(cfg, ds)
    files = {}
    for entry in cfg.models:
        tag = entry if isinstance(entry, str) else entry["tag"]
        if tag == "prior":
            model = fit_prior(ds, split.train_ids)
            files["models/prior.json"] = _json({"kind": "prior", "class_frequencies": model.class_frequencies.tolist()})
        elif tag == "ordered_logistic":
            model = fit_ordered_logistic(ds, split.train_ids, covariates=None if cfg.covariates is None else list(cfg.covariates))
            files["models/ordered_logistic.json"] = _json(model.to_dict())
        else:
            continue
        probs = predict_probs(model, ds, ds.ids, tag)
        files[f"probs/{tag}.csv"] = _csv(["id", *(f"p{k + 1}" for k in range(ds.n_classes))], [[rid, *row] for rid, row in zip(probs.ids, probs.values.tolist())])
    _write(out, files)
    if not quiet:
        print(f"split {split.split_index}: fitted {sorted(k.split('/')[1][:-5] for k in files if k.startswith('models/'))}")
    return EXIT_OK


def _calibrate_all(cfg, ds, fixed, split):
    seed = derive_seed(cfg.master_seed, "u", split.split_index)
    out = []
    for tag, (probs, _) in _fit_models(cfg, ds, fixed, split).items():
        scores = score_calibration(probs, ds, split.cal_ids, seed)
        for method in cfg.methods:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", EmptyCalibrationWarning)
                ts = calibrate(scores, method, cfg.alpha, cfg.lam, groups=range(1, ds.n_groups + 1))
            out.append((tag, method, probs, ts, seed))
    return out


def cmd_calibrate(cfg, out: Path, quiet: bool) -> int:
    ds, fixed = harness.load_inputs(cfg)
    split, _ = _split_for(cfg, ds)
    files = {}
    for tag, method, _, ts, _ in _calibrate_all(cfg, ds, fixed, split):
        d = ts.to_dict(ds.group_labels)
        d.update({"model": tag, "split_index": split.split_index})
        files[f"thresholds/{tag}/{method}.json"] = _json(d)
    _write(out, files)
    if not quiet:
        print(f"split {split.split_index}: wrote {len(files)} threshold file(s)")
    return EXIT_OK


def cmd_audit(cfg, out: Path, quiet: bool) -> int:
    ds, fixed = harness.load_inputs(cfg)
    split, _ = _split_for(cfg, ds)
    files, results = {}, []
    for tag, method, probs, ts, seed in _calibrate_all(cfg, ds, fixed, split):
        sets = predict_sets(probs, ts, ds, split.test_ids, seed, force_nonempty=cfg.force_nonempty, independent_u_per_label=cfg.independent_u_per_label)
        d = ts.to_dict(ds.group_labels)
        d.update({"model": tag, "split_index": split.split_index})
        files[f"thresholds/{tag}/{method}.json"] = _json(d)
        files[f"sets/{tag}/{method}.csv"] = _csv(
            ["id", "labels", "set_size", "covered"],
            [[rid, "-".join(str(k + 1) for k in row.nonzero()[0]), int(row.sum()), int(c)] for rid, row, c in zip(sets.ids, sets.membership, sets.covered)],
        )
        results.append(evaluate_split(sets, ds, split.split_index, method, tag, ts))
    summary = [
        {"model": r.model_tag, "method": r.method, "weighted_coverage": r.weighted_coverage, "weighted_size": r.weighted_size, "weighted_gap": r.weighted_gap}
        for r in results
    ]
    files["results.csv"] = _csv(
        ["split_index", "model", "method", *harness.SplitResult.METRICS, "n_empty"],
        [[r.split_index, r.model_tag, r.method, *(getattr(r, m) for m in harness.SplitResult.METRICS), r.n_empty] for r in results],
    )
    files["group_results.csv"] = _csv(
        ["model", "method", "group", "n_cal", "n_test", "weighted_coverage", "weighted_size", "threshold"],
        [[r.model_tag, r.method, ds.group_labels[g - 1], m.n_cal, m.n_test, m.weighted_coverage, m.weighted_size, m.threshold] for r in results for g, m in sorted(r.per_group.items())],
    )
    _write(out, files)
    if not quiet:
        print(format_summary(summary))
    return EXIT_OK


def cmd_experiment(cfg, out: Path, quiet: bool) -> int:
    report = harness.run_experiment(cfg, out)
    if not quiet:
        print(format_summary(report.summary))
        n_warn = len(report.integrity["min_cell_warnings"])
        if n_warn:
            print(f"{n_warn} split(s) had a calibration cell below {cfg.min_cell_warn}")
        print(f"HASH {report.content_hash}")
    return EXIT_OK


def cmd_mechanism(cfg, out: Path, quiet: bool) -> int:
    rep = harness.mechanism_study(cfg, out)
    if not quiet:
        for (key, metric), c in sorted(rep.diagnostics.correlations.items()):
            if metric == "abs_delta_set_size":
                print(f"{key:<36} r={c.pearson_r:+.3f} rho={c.spearman_rho:+.3f} n={c.n}")
    return EXIT_OK


def cmd_report(exp_dir: Path, quiet: bool) -> int:
    needed = ["summary.csv", "group_summary.csv", "paired.csv", "diagnostics.json"]
    missing = [n for n in needed if not (exp_dir / n).exists()]
    if missing:
        raise UsageError(f"experiment directory {exp_dir} is missing: {', '.join(missing)}")
    rendered = render(exp_dir)
    rendered.write(exp_dir / "report")
    if not rendered.hash_ok:
        print("warning: content hash mismatch; outputs were modified after the run", file=sys.stderr)
    if not quiet:
        print(rendered.text, end="")
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "split": cmd_split,
    "fit": cmd_fit,
    "calibrate": cmd_calibrate,
    "audit": cmd_audit,
    "experiment": cmd_experiment,
    "mechanism": cmd_mechanism,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="survey-conformal", description="Group-aware ordinal conformal prediction and survey-weighted auditing.")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", help="JSON configuration document")
    p.add_argument("--out", help="output directory (for 'report': the experiment directory)")
    p.add_argument("--override", action="append", default=[], metavar="K=V", help="override a config key; repeatable")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--quiet", action="store_true", help="suppress tables on stdout")
    return p


def _error(out: Path | None, code: int, exc: BaseException) -> int:
    payload = {"exit_code": code, "error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, DataValidationError):
        payload["problems"] = [{"row": r, "message": m} for r, m in exc.problems]
    if code not in (EXIT_USAGE, EXIT_INTEGRITY):
        payload["traceback"] = traceback.format_exc()
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / "error.json").write_text(json.dumps(payload, indent=2) + "\n")
        except OSError:
            pass
    print(f"error: {exc}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING, format="%(levelname)s: %(message)s")
    out = Path(args.out) if args.out else None
    try:
        if args.subcommand == "report":
            if out is None:
                raise UsageError("report needs --out pointing at an experiment directory")
            return cmd_report(out, args.quiet)
        if out is None:
            raise UsageError("--out is required")
        cfg = load_config(args)
        out.mkdir(parents=True, exist_ok=True)
        err = out / "error.json"
        if err.exists():
            err.unlink()
        return COMMANDS[args.subcommand](cfg, out, args.quiet)
    except UsageError as exc:
        print(parser.format_usage(), end="", file=sys.stderr)
        return _error(out, EXIT_USAGE, exc)
    except (SplitIntegrityError, DataValidationError) as exc:
        return _error(out, EXIT_INTEGRITY, exc)
    except (FileNotFoundError, KeyError, ValueError, SeparationError) as exc:
        return _error(out, EXIT_USAGE, exc)


if __name__ == "__main__":
    sys.exit(main())
