"""Aggregation of persisted runs into tables and plots.

Tables pivot on method (rows) and memory size (columns); cells are
"mean ± std" strings over the runs that share that cell (typically one per
class-order seed). Accuracies are reported on the 0-100 scale at one decimal,
forgetting as a bare three-decimal fraction, balancedness prefixed with the
beta symbol.
"""

from __future__ import annotations

import csv
import io as stringio
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from sdaf.errors import ConfigError
from sdaf.io import load_feature_dump
from sdaf.metrics import AccuracyMatrix, scree

TABLE_METRICS = (
    "end_accuracy",
    "avg_incremental_accuracy",
    "forgetting",
    "balancedness",
)


def format_mean_std(mean: float, std: float) -> str:
    """Accuracy-table cell, e.g. 66.4 ± 1.0 (inputs already on 0-100 scale)."""
    return f"{mean:.1f} ± {std:.1f}"


def format_forgetting(value: float) -> str:
    return f"{value:.3f}"


def format_balancedness(value: float) -> str:
    return f"β={value:.3f}"


def collect_reports(run_dirs) -> list[dict]:
    reports = []
    for run_dir in run_dirs:
        path = Path(run_dir) / "report.json"
        if not path.exists():
            raise ConfigError(f"{run_dir} has no report.json")
        reports.append(json.loads(path.read_text()))
    return reports


def build_tables(reports: list[dict]) -> dict:
    """Pivot per-run reports into formatted metric tables.

    Returns {metric: {method: {memory_size: cell}}} plus a "raw" entry with
    unformatted means/stds (population std over the grouped runs).
    """
    if not reports:
        raise ConfigError("need at least one run report")
    groups: dict[tuple[str, int], list[dict]] = {}
    for rep in reports:
        groups.setdefault((rep["method"], int(rep["memory_size"])), []).append(rep)

    tables: dict = {metric: {} for metric in TABLE_METRICS}
    raw: dict = {metric: {} for metric in TABLE_METRICS}
    for (method, m_size), reps in sorted(groups.items()):
        for metric in TABLE_METRICS:
            values = [rep[metric] for rep in reps if rep.get(metric) is not None]
            if not values:
                continue
            mean = float(np.mean(values))
            std = float(np.std(values))
            if metric in ("end_accuracy", "avg_incremental_accuracy"):
                cell = format_mean_std(100.0 * mean, 100.0 * std)
            elif metric == "forgetting":
                cell = format_forgetting(mean)
            else:
                cell = format_balancedness(mean)
            tables[metric].setdefault(method, {})[m_size] = cell
            raw[metric].setdefault(method, {})[m_size] = {"mean": mean, "std": std}
    tables["raw"] = raw
    return tables


def render_json(tables: dict) -> str:
    return json.dumps(tables, indent=2) + "\n"


def render_csv(tables: dict) -> str:
    """One block per metric: header row of memory sizes, one row per method."""
    buf = stringio.StringIO()
    writer = csv.writer(buf)
    for metric in TABLE_METRICS:
        table = tables[metric]
        if not table:
            continue
        sizes = sorted({m for row in table.values() for m in row})
        writer.writerow([metric] + [f"M={m}" for m in sizes])
        for method in sorted(table):
            writer.writerow([method] + [table[method].get(m, "") for m in sizes])
        writer.writerow([])
    return buf.getvalue()


def emit_report(run_dirs, fmt: str = "json", out=None) -> str:
    """Render the aggregate tables; optionally write them to ``out``."""
    if fmt not in ("csv", "json"):
        raise ConfigError(f"unknown report format {fmt!r}")
    tables = build_tables(collect_reports(run_dirs))
    text = render_json(tables) if fmt == "json" else render_csv(tables)
    if out is not None:
        Path(out).write_text(text)
    return text


def _default_plot_path(run_dir: Path, kind: str) -> Path:
    plot_dir = run_dir / "plots"
    plot_dir.mkdir(parents=True, exist_ok=True)
    return plot_dir / f"{kind}.png"


def plot_confusion(run_dir, out=None) -> Path:
    """Final-stage confusion heatmap from report.json."""
    run_dir = Path(run_dir)
    report = json.loads((run_dir / "report.json").read_text())
    counts = np.asarray(report["confusion_final"])
    out = Path(out) if out is not None else _default_plot_path(run_dir, "confusion")
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(counts, cmap="viridis")
    ax.set_xlabel("predicted class")
    ax.set_ylabel("true class")
    ax.set_xticks(range(counts.shape[0]), range(1, counts.shape[0] + 1))
    ax.set_yticks(range(counts.shape[0]), range(1, counts.shape[0] + 1))
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_scree(run_dir, out=None) -> Path:
    """Eigenvalue spectrum of final-encoder features over all test stages."""
    run_dir = Path(run_dir)
    dump_dir = run_dir / "dumps"
    dumps = sorted(dump_dir.glob("stage*_data*.f32"))
    if not dumps:
        raise ConfigError(f"{dump_dir} holds no representation dumps")
    loaded = [load_feature_dump(p) for p in dumps]
    final_stage = max(meta["stage"] for _, meta in loaded)
    feats = np.concatenate(
        [f for f, meta in loaded if meta["stage"] == final_stage], axis=0
    )
    eigvals = scree(feats, normalize=True)
    out = Path(out) if out is not None else _default_plot_path(run_dir, "scree")
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(range(1, len(eigvals) + 1), eigvals, marker=".")
    ax.set_yscale("log")
    ax.set_xlabel("eigenvalue index")
    ax.set_ylabel("eigenvalue")
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_accuracy(run_dir, out=None) -> Path:
    """Mean per-class accuracy after each stage."""
    run_dir = Path(run_dir)
    matrix = AccuracyMatrix.load(run_dir / "accuracy_matrix.json")
    means = [100.0 * float(np.mean(row)) for row in matrix.rows]
    out = Path(out) if out is not None else _default_plot_path(run_dir, "accuracy")
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(range(1, len(means) + 1), means, marker="o")
    ax.set_xticks(range(1, len(means) + 1))
    ax.set_xlabel("stage")
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


PLOT_KINDS = {
    "confusion": plot_confusion,
    "scree": plot_scree,
    "accuracy": plot_accuracy,
}
