"""Run-directory aggregation: comparison tables, plot data, and figures.

A run directory is whatever `tailor` wrote: config.json, history.jsonl,
a final model checkpoint with its manifest, and per-iteration
checkpoints. Reports merge several run directories into two CSV tables
(accuracy against FLOPs reduction per method, and per-layer pruned
filter counts per run) and render a PNG next to each CSV.
"""

from __future__ import annotations

import csv
import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .errors import DataFormatError

HISTORY_FILE = "history.jsonl"
FINAL_MANIFEST = "final_model.ftm.json"
INITIAL_MANIFEST = "initial_model.ftm.json"


def read_history(run_dir: str) -> list[dict]:
    path = os.path.join(run_dir, HISTORY_FILE)
    if not os.path.exists(path):
        raise DataFormatError(f"{run_dir}: no {HISTORY_FILE}")
    records = []
    with open(path) as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise DataFormatError(f"{path}:{line_no}: bad history record: {e}") from None
    if not records:
        raise DataFormatError(f"{path}: history is empty")
    return records


def _read_manifest(run_dir: str, name: str) -> dict:
    path = os.path.join(run_dir, name)
    if not os.path.exists(path):
        raise DataFormatError(f"{run_dir}: no {name}")
    with open(path) as f:
        return json.load(f)


def _run_label(run_dir: str, records: list[dict]) -> str:
    method = records[0].get("method", "unknown")
    return f"{os.path.basename(os.path.normpath(run_dir))}:{method}"


def pruned_filter_table(run_dir: str) -> list[dict]:
    """Per-conv-layer original vs final filter counts for one run."""
    initial = _read_manifest(run_dir, INITIAL_MANIFEST)
    final = _read_manifest(run_dir, FINAL_MANIFEST)
    init_counts = {e["layer_index"]: e["filters"] for e in initial["conv_layers"]}
    final_counts = {e["layer_index"]: e["filters"] for e in final["conv_layers"]}
    if set(init_counts) != set(final_counts):
        raise DataFormatError(
            f"{run_dir}: initial and final manifests disagree on conv layers"
        )
    rows = []
    for layer in sorted(init_counts):
        rows.append({
            "layer_index": layer,
            "original_filters": init_counts[layer],
            "final_filters": final_counts[layer],
            "pruned_filters": init_counts[layer] - final_counts[layer],
        })
    return rows


def write_report(run_dirs: list[str], out_dir: str) -> dict:
    """Emit the comparison CSVs and figures; returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    series_rows = []
    per_run_tables = {}
    for run_dir in run_dirs:
        records = read_history(run_dir)
        label = _run_label(run_dir, records)
        for rec in records:
            series_rows.append({
                "run": label,
                "method": rec["method"],
                "iteration": rec["iteration"],
                "flops": rec["flops"],
                "flops_reduction": rec["flops_reduction"],
                "val_top1": rec["val_top1"],
            })
        per_run_tables[label] = pruned_filter_table(run_dir)

    series_path = os.path.join(out_dir, "accuracy_vs_reduction.csv")
    with open(series_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=[
            "run", "method", "iteration", "flops", "flops_reduction", "val_top1"])
        writer.writeheader()
        writer.writerows(series_rows)

    filters_path = os.path.join(out_dir, "pruned_filters.csv")
    with open(filters_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=[
            "run", "layer_index", "original_filters", "final_filters", "pruned_filters"])
        writer.writeheader()
        for label, rows in per_run_tables.items():
            for row in rows:
                writer.writerow({"run": label, **row})

    series_png = os.path.join(out_dir, "accuracy_vs_reduction.png")
    _plot_series(series_rows, series_png)
    filters_png = os.path.join(out_dir, "pruned_filters.png")
    _plot_filters(per_run_tables, filters_png)

    return {
        "series_csv": series_path,
        "filters_csv": filters_path,
        "series_png": series_png,
        "filters_png": filters_png,
    }


def _plot_series(rows: list[dict], path: str) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    by_run: dict[str, list[dict]] = {}
    for row in rows:
        by_run.setdefault(row["run"], []).append(row)
    for label, recs in by_run.items():
        recs = sorted(recs, key=lambda r: r["iteration"])
        xs = [100.0 * r["flops_reduction"] for r in recs]
        ys = [r["val_top1"] for r in recs]
        ax.plot(xs, ys, marker="o", label=label)
    ax.set_xlabel("FLOPs reduction (%)")
    ax.set_ylabel("validation top-1 (%)")
    ax.legend(fontsize=7)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_filters(tables: dict[str, list[dict]], path: str) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    width = 0.8 / max(1, len(tables))
    for k, (label, rows) in enumerate(sorted(tables.items())):
        xs = [r["layer_index"] + k * width for r in rows]
        ys = [r["pruned_filters"] for r in rows]
        ax.bar(xs, ys, width=width, label=label)
    ax.set_xlabel("conv layer index")
    ax.set_ylabel("pruned filters")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
