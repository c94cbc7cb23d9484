"""Table 1-3 / importance report rendering (CSV, Markdown, figures)."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .evaluation import METHODS, EvalReport, EvalRow, aggregate, mean_importance
from .features import FEATURE_NAMES
from .graph import NetworkStats

METRIC_LABEL = {"precision": "Precision", "recall": "Recall", "f1": "F1-score"}
TABLE2_METHODS = {"feature_lr": "LR", "feature_svm": "SVM", "feature_mlp": "ADAM", "feature_rf": "RF"}
TABLE3_METHODS = {"feature_rf": "Feature", "line_rf": "LINE", "deepwalk_rf": "Deepwalk",
                  "node2vec_rf": "node2vec", "gcn_feature": "GCN+Feature"}
METHOD_LABEL = {**TABLE3_METHODS, **{k: f"Feature/{v}" for k, v in TABLE2_METHODS.items()}}


def _num(x, digits=4):
    return "" if x is None or not np.isfinite(x) else f"{x:.{digits}f}"


def render(header, rows, fmt="csv") -> str:
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        return buf.getvalue()
    if fmt == "markdown":
        lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
        lines += ["| " + " | ".join(str(c) for c in row) + " |" for row in rows]
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown format {fmt!r}")


def datasets_of(report: EvalReport) -> list:
    names = list(report.metadata.get("datasets", []))
    for name in report.table1:
        if name not in names:
            names.append(name)
    for r in report.rows:
        if r.dataset not in names:
            names.append(r.dataset)
    return names


def table1(report: EvalReport):
    header = ["dataset", "n_nodes", "n_edges", "avg_degree", "clustering"]
    rows = []
    for name in datasets_of(report):
        s = report.table1.get(name)
        if s is not None:
            rows.append([name, s.n_nodes, s.n_edges, _num(s.avg_degree, 3), _num(s.clustering, 3)])
    return header, rows


def method_table(report: EvalReport, methods: dict, first_col: str, fmt="csv"):
    """Metric-major layout: one row per (metric, method), one column per dataset."""
    names = datasets_of(report)
    summary = aggregate(report.rows)
    present = {r.method for r in report.rows}
    header = ["metric", first_col, *names]
    rows = []
    for metric in ("precision", "recall", "f1"):
        for m, label in methods.items():
            if m not in present:
                continue
            cells = []
            for ds in names:
                stat = summary.get((ds, m), {}).get(metric)
                if stat is None:
                    cells.append("")
                elif fmt == "markdown":
                    cells.append(f"{stat[0]:.4f} ± {stat[1]:.4f}")
                else:
                    cells.append(_num(stat[0]))
            rows.append([METRIC_LABEL[metric], label, *cells])
    return header, rows


def importance_table(report: EvalReport):
    imp = mean_importance(report)
    return ["feature", "importance"], [[n, _num(v, 6)] for n, v in zip(FEATURE_NAMES, imp)]


def summary_by_recall(report: EvalReport):
    summary = aggregate(report.rows)
    entries = sorted(summary.items(), key=lambda kv: (-kv[1]["recall"][0], kv[0][0], METHODS.index(kv[0][1])))
    header = ["method", "dataset", "precision", "recall", "f1", "runs"]
    rows = []
    for (ds, m), st in entries:
        rows.append([METHOD_LABEL.get(m, m), ds,
                     *(f"{st[k][0]:.4f} ± {st[k][1]:.4f}" for k in ("precision", "recall", "f1")),
                     st["recall"][2]])
    return header, rows


def summary_markdown(report: EvalReport) -> str:
    parts = ["# Ponzi detection report", ""]
    meta = report.metadata
    if meta:
        parts += [f"- seeds: {', '.join(str(s) for s in meta.get('seeds', []))}",
                  f"- folds: {meta.get('k', '')}",
                  f"- protocol: {meta.get('fold_policy', '')}", ""]
    parts += ["## Table 1: sub-transaction networks", "", render(*table1(report), "markdown")]
    parts += ["## Table 2: classifiers on extracted features", "",
              render(*method_table(report, TABLE2_METHODS, "classifier", "markdown"), "markdown")]
    parts += ["## Table 3: detection methods", "",
              render(*method_table(report, TABLE3_METHODS, "method", "markdown"), "markdown")]
    parts += ["## All methods ordered by recall", "", render(*summary_by_recall(report), "markdown")]
    parts += ["## Feature importance", "", render(*importance_table(report), "markdown")]
    return "\n".join(parts)


def report_to_json(report: EvalReport) -> dict:
    return {
        "rows": [asdict(r) for r in report.rows],
        "importances": {k: [list(map(float, v)) for v in vs] for k, vs in sorted(report.importances.items())},
        "table1": {k: asdict(s) for k, s in report.table1.items()},
        "metadata": report.metadata,
    }


def report_from_json(data: dict) -> EvalReport:
    return EvalReport(
        rows=[EvalRow(**r) for r in data.get("rows", [])],
        importances={k: [np.array(v) for v in vs] for k, vs in data.get("importances", {}).items()},
        table1={k: NetworkStats(**s) for k, s in data.get("table1", {}).items()},
        metadata=data.get("metadata", {}),
    )


def render_report(report: EvalReport, fmt="csv") -> dict:
    """{file name: text} for the four tables in ``fmt`` (csv or markdown)."""
    ext = {"csv": "csv", "markdown": "md"}[fmt]
    return {
        f"table1.{ext}": render(*table1(report), fmt),
        f"table2.{ext}": render(*method_table(report, TABLE2_METHODS, "classifier", fmt), fmt),
        f"table3.{ext}": render(*method_table(report, TABLE3_METHODS, "method", fmt), fmt),
        f"importance.{ext}": render(*importance_table(report), fmt),
    }


def write_report(report: EvalReport, directory, figures=True) -> list:
    """Write table1-3, importance, summary.md, report.json (+ figures/)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = render_report(report, "csv")
    files["summary.md"] = summary_markdown(report)
    files["report.json"] = json.dumps(report_to_json(report), indent=1, sort_keys=True) + "\n"
    written = []
    for name, text in files.items():
        path = directory / name
        path.write_text(text, encoding="utf-8", newline="\n")
        written.append(path)
    if figures:
        written += write_figures(report, directory)
    return written


def write_figures(report: EvalReport, directory) -> list:
    """figures/importance.png and figures/recall.png (skipped when there are no rows)."""
    if not report.rows:
        return []
    from . import plotting

    figdir = Path(directory) / "figures"
    figdir.mkdir(parents=True, exist_ok=True)
    written = []
    imp = mean_importance(report)
    if np.all(np.isfinite(imp)):
        plotting.plot_importance(FEATURE_NAMES, imp, figdir / "importance.png")
        written.append(figdir / "importance.png")
    methods = [m for m in METHODS if any(r.method == m for r in report.rows)]
    plotting.plot_method_comparison(aggregate(report.rows), datasets_of(report), methods,
                                    METHOD_LABEL, figdir / "recall.png")
    written.append(figdir / "recall.png")
    return written


def read_report(directory) -> EvalReport:
    return report_from_json(json.loads((Path(directory) / "report.json").read_text(encoding="utf-8")))
