"""Results CSV, markdown tables and label-efficiency charts."""

from __future__ import annotations

import csv
import io
import logging
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

log = logging.getLogger(__name__)

RESULT_COLUMNS = ("dataset", "task", "fraction", "accuracy", "precision", "recall", "f1")
METRIC_COLUMNS = ("accuracy", "precision", "recall", "f1")


class ReportError(ValueError):
    pass


def format_metric(value: float) -> str:
    return f"{float(value):.2f}"


def format_fraction(value: float) -> str:
    return f"{float(value):g}"


def results_csv_text(rows: Iterable[Mapping]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RESULT_COLUMNS)
    for r in rows:
        writer.writerow([r["dataset"], r["task"], format_fraction(r["fraction"]),
                         *(format_metric(r[m]) for m in METRIC_COLUMNS)])
    return buf.getvalue()


def write_results_csv(rows: Iterable[Mapping], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(results_csv_text(rows), encoding="utf-8")
    return path


def parse_results_csv(text: str) -> list[dict]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        return []
    missing = [c for c in RESULT_COLUMNS if c not in reader.fieldnames]
    if missing:
        raise ReportError(f"results CSV is missing columns: {missing}")
    rows = []
    for line_no, r in enumerate(reader, start=2):
        try:
            rows.append({"dataset": r["dataset"], "task": r["task"], "fraction": float(r["fraction"]),
                         **{m: float(r[m]) for m in METRIC_COLUMNS}})
        except (TypeError, ValueError) as exc:
            raise ReportError(f"results CSV row {line_no}: {exc}") from None
    return rows


def read_results_csv(path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise ReportError(f"results CSV not found: {path}")
    return parse_results_csv(path.read_text(encoding="utf-8"))


def _groups(rows: Sequence[Mapping]) -> dict[tuple[str, str], list[Mapping]]:
    groups: dict[tuple[str, str], list[Mapping]] = {}
    for r in rows:
        groups.setdefault((r["dataset"], r["task"]), []).append(r)
    return {k: sorted(v, key=lambda r: r["fraction"]) for k, v in groups.items()}


def metric_cells(row: Mapping) -> list[str]:
    return [format_metric(row[m]) for m in METRIC_COLUMNS]


def render_report(rows: Sequence[Mapping]) -> str:
    """One markdown table per (dataset, task), rows in ascending label fraction."""
    if not rows:
        return "No results.\n"
    out = []
    for (dataset, task), group in _groups(rows).items():
        out.append(f"### {dataset} ({task})\n")
        out.append("| Dataset used | Data | Accuracy | Precision | Recall | F1-Score |")
        out.append("|---|---|---|---|---|---|")
        for r in group:
            pct = f"{r['fraction'] * 100:g}%"
            out.append(f"| {dataset} | {pct} | " + " | ".join(metric_cells(r)) + " |")
        out.append("")
    return "\n".join(out)


def plot_label_efficiency(rows: Sequence[Mapping], out_dir, fmt: str = "png",
                          metadata: Mapping[str, str] | None = None) -> tuple[list[Path], list[str]]:
    """One accuracy-vs-fraction chart per task with a line per dataset.

    Returns the written paths and a list of flags for series with fewer than two points.
    """
    if fmt not in ("png", "svg"):
        raise ReportError(f"unsupported chart format {fmt!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    flags, paths = [], []
    by_task: dict[str, dict[str, list[Mapping]]] = {}
    for (dataset, task), group in _groups(rows).items():
        by_task.setdefault(task, {})[dataset] = group

    desc = "; ".join(f"{k}={v}" for k, v in sorted((metadata or {}).items()))
    for task in sorted(by_task):
        fig, ax = plt.subplots(figsize=(5, 3.5), dpi=100)
        for dataset, group in sorted(by_task[task].items()):
            if len(group) < 2:
                flags.append(f"{dataset}/{task}: single-point series")
                log.warning("series %s/%s has a single label fraction", dataset, task)
            xs = [r["fraction"] * 100 for r in group]
            ys = [r["accuracy"] for r in group]
            ax.plot(xs, ys, marker="o", label=dataset)
        ax.set_xlabel("Labelled training data (%)")
        ax.set_ylabel("Accuracy (%)")
        ax.set_title(f"Label efficiency, {task} classification")
        ax.grid(True, alpha=0.3)
        ax.legend()
        fig.tight_layout()
        path = out_dir / f"label_efficiency_{task}.{fmt}"
        if fmt == "png":
            meta = {"Software": None, "Description": desc} if desc else {"Software": None}
        else:
            meta = {"Date": None, "Creator": None, "Description": desc or None}
        with plt.rc_context({"svg.hashsalt": "sslx"}):
            fig.savefig(path, format=fmt, metadata=meta)
        plt.close(fig)
        paths.append(path)
    return paths, flags
