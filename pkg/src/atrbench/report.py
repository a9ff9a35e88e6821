"""Report serialization and paper-shaped table/figure rendering.

Tables: one per (direction, query type), models as rows, dataset x
metric columns, plus a separate table for the cross-dataset mean. The
best value in each column is flagged (bold in markdown; a trailing
"best" row naming the winners in CSV, since CSV has no styling).

Figures: one grouped bar chart per table, written as PNG with the
Software metadata field suppressed so repeated runs are byte-identical.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from matplotlib.figure import Figure

from . import __version__
from .errors import BenchError
from .metrics import (
    MEAN_DATASET_LABEL,
    METRIC_DELTA_RANK,
    METRIC_HNSR,
    METRIC_RECALL,
    METRIC_TFR,
    METRIC_TFR_HN,
    MetricKey,
    MetricReport,
    display_metric,
    format_value,
)

_METRIC_ORDER = {
    METRIC_RECALL: 0,
    METRIC_HNSR: 1,
    METRIC_TFR: 2,
    METRIC_TFR_HN: 3,
    METRIC_DELTA_RANK: 4,
}


class ReportError(BenchError):
    """Report files or rendering inputs are malformed."""


def write_jsonl(rows: Iterable[dict], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as handle:
        for row in rows:
            handle.write(json.dumps(row) + "\n")


def write_report_file(report: MetricReport, path: str | Path) -> None:
    """One line-delimited record per metric entry, canonical order."""
    write_jsonl(report.to_records(), path)


def load_report_file(path: str | Path) -> MetricReport:
    report = MetricReport()
    with Path(path).open(encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                key = MetricKey(
                    str(row["dataset"]),
                    str(row["model"]),
                    str(row["query_type"]),
                    str(row["direction"]),
                    str(row["metric"]),
                    None if row["k"] is None else int(row["k"]),
                )
                report.add(key, float(row["value"]), int(row["count"]))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise ReportError(
                    f"{path}:{line_no}: bad report record: {exc}"
                ) from exc
    return report


def write_provenance(
    path: str | Path,
    config_path: Optional[Path],
    input_digests: dict[str, str],
    seed: int,
) -> None:
    """Config hash plus sha256 of every input file consumed by the run.

    Deliberately excludes anything timing- or host-dependent so reruns
    produce identical bytes."""
    import hashlib

    record = {
        "tool": "atrbench",
        "version": __version__,
        "seed": seed,
        "config_path": str(config_path) if config_path else None,
        "config_sha256": (
            hashlib.sha256(Path(config_path).read_bytes()).hexdigest()
            if config_path
            else None
        ),
        "inputs": dict(sorted(input_digests.items())),
    }
    Path(path).write_text(
        json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _table_groups(report: MetricReport):
    """Yield (name, columns, models, cells) per rendered table."""
    groups: dict[tuple[str, str], list[MetricKey]] = {}
    for key in report.sorted_keys():
        groups.setdefault((key.direction, key.query_type), []).append(key)

    for (direction, query_type), keys in sorted(groups.items()):
        for mean_part in (False, True):
            part = [
                k
                for k in keys
                if (k.dataset == MEAN_DATASET_LABEL) == mean_part
            ]
            if not part:
                continue
            columns = sorted(
                {(k.dataset, k.metric, k.k) for k in part},
                key=lambda c: (
                    c[0],
                    _METRIC_ORDER[c[1]],
                    c[2] if c[2] is not None else 10**9,
                ),
            )
            models = sorted({k.model for k in part})
            cells = {
                (k.model, (k.dataset, k.metric, k.k)): report.entries[k]
                for k in part
            }
            name = f"{direction.lower()}_{query_type}"
            if mean_part:
                name = f"{MEAN_DATASET_LABEL}_{name}"
            yield name, columns, models, cells


def _column_label(column: tuple[str, str, Optional[int]]) -> str:
    dataset, metric, k = column
    return f"{dataset} {display_metric(metric, k)}"


def _best_models(
    models: Sequence[str],
    column: tuple[str, str, Optional[int]],
    cells: dict,
) -> set[str]:
    values = {
        m: cells[(m, column)] for m in models if (m, column) in cells
    }
    if not values:
        return set()
    top = max(values.values())
    return {m for m, v in values.items() if v == top}


def _write_csv(
    path: Path,
    columns: list[tuple[str, str, Optional[int]]],
    models: Sequence[str],
    cells: dict,
) -> None:
    import csv

    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["model"] + [_column_label(c) for c in columns])
        for model in models:
            row = [model]
            for column in columns:
                value = cells.get((model, column))
                row.append("" if value is None else format_value(value))
            writer.writerow(row)
        best_row = ["best"]
        for column in columns:
            best_row.append("|".join(sorted(_best_models(models, column, cells))))
        writer.writerow(best_row)


def _write_markdown(
    path: Path,
    columns: list[tuple[str, str, Optional[int]]],
    models: Sequence[str],
    cells: dict,
) -> None:
    lines = []
    header = ["model"] + [_column_label(c) for c in columns]
    lines.append("| " + " | ".join(header) + " |")
    lines.append("|" + "|".join([" --- "] * len(header)) + "|")
    best = {c: _best_models(models, c, cells) for c in columns}
    for model in models:
        row = [model]
        for column in columns:
            value = cells.get((model, column))
            if value is None:
                row.append("")
            else:
                text = format_value(value)
                row.append(f"**{text}**" if model in best[column] else text)
        lines.append("| " + " | ".join(row) + " |")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_figure(
    path: Path,
    title: str,
    columns: list[tuple[str, str, Optional[int]]],
    models: Sequence[str],
    cells: dict,
) -> None:
    fig = Figure(figsize=(max(6.0, 1.1 * len(columns) + 2.0), 4.0))
    ax = fig.subplots()
    positions = np.arange(len(columns), dtype=np.float64)
    width = 0.8 / max(len(models), 1)
    for m_pos, model in enumerate(models):
        values = [
            cells.get((model, column), np.nan) for column in columns
        ]
        offset = (m_pos - (len(models) - 1) / 2.0) * width
        ax.bar(positions + offset, values, width=width, label=model)
    ax.set_xticks(positions)
    ax.set_xticklabels(
        [_column_label(c) for c in columns], rotation=30, ha="right", fontsize=8
    )
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    # Software metadata carries a version string by default; drop it so
    # reruns are byte-identical.
    fig.savefig(path, format="png", metadata={"Software": None})


def render_report(
    report: MetricReport,
    out_dir: str | Path,
    formats: Sequence[str] = ("csv", "markdown"),
    figures: bool = True,
) -> list[Path]:
    """Render every table (and optionally a figure per table)."""
    if not report.entries:
        raise ReportError("cannot render an empty report")
    out_dir = Path(out_dir)
    tables_dir = out_dir / "tables"
    tables_dir.mkdir(parents=True, exist_ok=True)
    figures_dir = out_dir / "figures"
    if figures:
        figures_dir.mkdir(parents=True, exist_ok=True)

    written: list[Path] = []
    for name, columns, models, cells in _table_groups(report):
        if "csv" in formats:
            path = tables_dir / f"{name}.csv"
            _write_csv(path, columns, models, cells)
            written.append(path)
        if "markdown" in formats:
            path = tables_dir / f"{name}.md"
            _write_markdown(path, columns, models, cells)
            written.append(path)
        if figures:
            path = figures_dir / f"{name}.png"
            _write_figure(path, name, columns, models, cells)
            written.append(path)
    return written
