"""Plain-text and CSV tables rendered from an experiment output directory."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

from .harness import directory_hash

log = logging.getLogger(__name__)

METHOD_ORDER = ("STANDARD", "MONDRIAN", "REG_MONDRIAN", "WEIGHTED_MONDRIAN")


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _num(s: str) -> float:
    if s in ("", "undefined"):
        return math.nan
    return float(s)


def _cell(x: float, digits: int = 3) -> str:
    if isinstance(x, str):
        return x
    if x is None or math.isnan(x):
        return "-"
    if math.isinf(x):
        return "+inf" if x > 0 else "-inf"
    return f"{x:.{digits}f}"


def format_table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(str(h)), *(len(str(r[i])) for r in rows)) if rows else len(str(h)) for i, h in enumerate(header)]
    line = "  ".join(str(h).ljust(w) for h, w in zip(header, widths))
    out = [line, "  ".join("-" * w for w in widths)]
    for r in rows:
        out.append("  ".join(str(v).rjust(w) if i else str(v).ljust(w) for i, (v, w) in enumerate(zip(r, widths))))
    return "\n".join(out)


def format_summary(summary: list[dict]) -> str:
    """Model x method table of weighted coverage, size and gap."""
    rows = [
        [s["model"], s["method"], _cell(float(s["weighted_coverage"])), _cell(float(s["weighted_size"])), _cell(float(s["weighted_gap"]))]
        for s in summary
    ]
    return format_table(["model", "method", "wtd_coverage", "wtd_size", "wtd_gap"], rows)


def _method_key(m: str) -> int:
    return METHOD_ORDER.index(m) if m in METHOD_ORDER else len(METHOD_ORDER)


@dataclass
class RenderedReport:
    text: str
    tables: dict[str, tuple[list[str], list[list[str]]]] = field(default_factory=dict)
    hash_ok: bool = True

    def write(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(self.text)
        for name, (header, rows) in self.tables.items():
            with open(out / f"{name}.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(header)
                w.writerows(rows)
        return out


def main_table(summary: list[dict]) -> tuple[list[str], list[list[str]]]:
    header = ["model", "method", "splits", "wtd_coverage", "wtd_size", "wtd_gap", "unwtd_coverage", "unwtd_gap"]
    rows = []
    for s in sorted(summary, key=lambda r: (r["model"], _method_key(r["method"]))):
        rows.append([
            s["model"], s["method"], s["n_splits"],
            _cell(_num(s["weighted_coverage"])), _cell(_num(s["weighted_size"])), _cell(_num(s["weighted_gap"])),
            _cell(_num(s["unweighted_coverage"])), _cell(_num(s["unweighted_gap"])),
        ])
    return header, rows


def group_table(group_summary: list[dict], model: str) -> tuple[list[str], list[list[str]]]:
    """Per-group weighted coverage for one model, rows sorted by STANDARD coverage ascending."""
    rows = [g for g in group_summary if g["model"] == model]
    methods = sorted({g["method"] for g in rows}, key=_method_key)
    by_group: dict[str, dict[str, dict]] = {}
    for g in rows:
        by_group.setdefault(g["group"], {})[g["method"]] = g
    ref = "STANDARD" if "STANDARD" in methods else methods[0]

    def sort_key(label):
        v = _num(by_group[label].get(ref, {}).get("weighted_coverage", "nan"))
        return (math.isnan(v), v, label)

    header = ["group", "n_cal", "n_test", *methods]
    out = []
    for label in sorted(by_group, key=sort_key):
        first = next(iter(by_group[label].values()))
        out.append([label, _cell(_num(first["n_cal"]), 1), _cell(_num(first["n_test"]), 1),
                    *(_cell(_num(by_group[label].get(m, {}).get("weighted_coverage", "nan"))) for m in methods)])
    return header, out


def paired_table(paired: list[dict], n_splits: int, metrics=("weighted_gap", "weighted_size", "weighted_coverage")) -> tuple[list[str], list[list[str]]]:
    header = ["model", "comparison", "metric", "delta", "ci95", "cohens_dz"]
    rows = []
    if n_splits < 2 or not paired:
        return header, [["-", "-", m, "-", "CI n/a", "-"] for m in metrics]
    for p in paired:
        if p["metric"] not in metrics:
            continue
        dz = "undefined" if p["cohens_dz"] == "undefined" else _cell(_num(p["cohens_dz"]), 2)
        rows.append([p["model"], p["comparison"], p["metric"], _cell(_num(p["delta"]), 4),
                     f"[{_cell(_num(p['ci_lo']), 4)}, {_cell(_num(p['ci_hi']), 4)}]", dz])
    return header, rows


def diagnostics_tables(diag: dict) -> dict[str, tuple[list[str], list[list[str]]]]:
    tables = {}
    rows = []
    for model, per_group in sorted(diag.get("overconfidence", {}).items()):
        for group, o in per_group.items():
            rows.append([model, group, _cell(o.get("weighted_accuracy")), _cell(o.get("weighted_confidence")), _cell(o.get("overconfidence"))])
    tables["overconfidence"] = (["model", "group", "accuracy", "confidence", "overconfidence"], rows)
    rows = []
    for key, modes in sorted(diag.get("extrema_counts", {}).items()):
        for mode, counts in sorted(modes.items()):
            for group, c in sorted(counts.items(), key=lambda kv: -kv[1]):
                rows.append([key, mode, group, c])
    tables["extrema"] = (["comparison", "failure_mode", "group", "count"], rows)
    rows = []
    for c in diag.get("correlations", []):
        rows.append([c["model"], c["metric"], c["n"], _cell(c["pearson_r"]), _cell(c["spearman_rho"]),
                     "*" if c.get("pearson_p_lt_0.001") else "", "*" if c.get("spearman_p_lt_0.001") else ""])
    tables["correlations"] = (["comparison", "metric", "n", "pearson_r", "spearman_rho", "p_r<.001", "p_rho<.001"], rows)
    return tables


def render(exp_dir: str | Path) -> RenderedReport:
    """Render tables from an experiment directory.

    A content-hash mismatch is reported as a warning and rendering continues.
    """
    exp = Path(exp_dir)
    hash_ok = True
    hash_file = exp / "HASH"
    notes = []
    if hash_file.exists():
        expected = hash_file.read_text().strip()
        actual = directory_hash(exp)
        if expected != actual:
            hash_ok = False
            msg = f"WARNING: content hash mismatch (HASH {expected[:12]}..., recomputed {actual[:12]}...)"
            log.warning(msg)
            notes.append(msg)
    else:
        notes.append("WARNING: no HASH file found")

    summary = _read_csv(exp / "summary.csv")
    group_summary = _read_csv(exp / "group_summary.csv")
    paired = _read_csv(exp / "paired.csv")
    diag = json.loads((exp / "diagnostics.json").read_text())
    n_splits = int(diag.get("n_splits", 0))

    tables = {"main": main_table(summary)}
    for model in sorted({g["model"] for g in group_summary}):
        tables[f"groups_{model}"] = group_table(group_summary, model)
    tables["paired"] = paired_table(paired, n_splits)
    tables.update(diagnostics_tables(diag))

    parts = [*notes, f"splits: {n_splits}", "", "Main results (means over splits)", format_table(*tables["main"])]
    for name, tbl in tables.items():
        if name.startswith("groups_"):
            parts += ["", f"Per-group weighted coverage, model {name[7:]} (sorted by STANDARD coverage)", format_table(*tbl)]
    parts += ["", "Paired deltas vs STANDARD", format_table(*tables["paired"])]
    if diag.get("paired_note"):
        parts.append(diag["paired_note"])
    parts += ["", "Overconfidence (weighted means over splits)", format_table(*tables["overconfidence"])]
    parts += ["", "Extrema concentration", format_table(*tables["extrema"])]
    parts += ["", "Cell-size correlations", format_table(*tables["correlations"])]
    return RenderedReport("\n".join(parts) + "\n", tables, hash_ok)
