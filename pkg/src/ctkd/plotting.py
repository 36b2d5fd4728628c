"""Figures written next to the CSV outputs (Agg backend, files only)."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import RunReport  # noqa: E402

_LOSS_COLUMNS = ("L_seg", "L_ctl", "L_psv", "L_kd", "total")


def _read_columns(path) -> dict[str, list]:
    with Path(path).open() as fh:
        rows = list(csv.DictReader(fh))
    cols: dict[str, list] = {}
    for key in rows[0].keys() if rows else ():
        cols[key] = [None if r[key] == "" else float(r[key]) for r in rows]
    return cols


def plot_training_curves(metrics_csv, out_path) -> Path:
    """Loss components, schedules and validation DSC against epoch."""
    cols = _read_columns(metrics_csv)
    out_path = Path(out_path)
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.8))
    epochs = cols.get("epoch", [])
    for key in _LOSS_COLUMNS:
        pts = [(e, v) for e, v in zip(epochs, cols.get(key, [])) if v is not None]
        if pts:
            axes[0].plot(*zip(*pts), label=key)
    axes[0].set_yscale("log")
    axes[0].set_title("losses")
    axes[0].legend(fontsize=8)
    for key in ("lr", "lambda_dis", "lambda_ssl"):
        pts = [(e, v) for e, v in zip(epochs, cols.get(key, [])) if v is not None]
        if pts:
            axes[1].plot(*zip(*pts), label=key)
    axes[1].set_yscale("symlog", linthresh=1e-4)
    axes[1].set_title("schedules")
    axes[1].legend(fontsize=8)
    pts = [(e, v) for e, v in zip(epochs, cols.get("val_dsc", [])) if v is not None]
    if pts:
        axes[2].plot(*zip(*pts), marker=".")
    axes[2].set_ylim(0, 1)
    axes[2].set_title("validation DSC (student)")
    for ax in axes:
        ax.set_xlabel("epoch")
    fig.tight_layout()
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return out_path


def plot_report(report: RunReport, out_path) -> Path:
    """Per-class DSC and NSD bars with population std error bars."""
    out_path = Path(out_path)
    names = [r.name for r in report.rows]
    x = range(len(names))
    w = 0.38
    fig, ax = plt.subplots(figsize=(max(5, 1.1 * len(names)), 3.8))
    ax.bar([i - w / 2 for i in x], [r.dsc_mean for r in report.rows], w, yerr=[r.dsc_std for r in report.rows], label="DSC")
    ax.bar([i + w / 2 for i in x], [r.nsd_mean for r in report.rows], w, yerr=[r.nsd_std for r in report.rows], label="NSD")
    ax.set_xticks(list(x))
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylim(0, 1.05)
    ax.legend()
    fig.tight_layout()
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return out_path
