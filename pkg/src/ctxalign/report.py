"""Run report writers: metric JSON, per-window CSV, log file and figures.

JSON output is canonical (sorted keys, repr floats) so identical runs
produce byte-identical files; every write goes to a temp file first and is
renamed into place.
"""

from __future__ import annotations

import csv
import json
import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import MetricReport

REPORT_SCHEMA_VERSION = 1


def atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def report_to_json(report: MetricReport, train_cfg=None, extra: dict | None = None) -> str:
    payload = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "task": report.task,
        "values": report.values,
        "per_horizon": report.per_horizon,
        "sample_count": report.sample_count,
        "config_digest": report.config_digest,
    }
    if train_cfg is not None:
        payload["train"] = {
            "lr0": train_cfg.lr0,
            "loss": train_cfg.loss,
            "optimizer": train_cfg.optimizer,
            "seed": train_cfg.seed,
            "batch_size": train_cfg.batch_size,
        }
    if extra:
        payload.update(extra)
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def write_windows_csv(path: Path, per_window: list[dict]) -> None:
    if not per_window:
        atomic_write_text(path, "")
        return
    columns = list(per_window[0].keys())
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in per_window:
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in columns])
    os.replace(tmp, path)


def _save_figure(fig, path: Path) -> None:
    tmp = path.with_name(path.name + ".tmp.png")
    fig.savefig(tmp, dpi=110)
    plt.close(fig)
    os.replace(tmp, path)


def loss_curve_figure(log_lines: list[str], path: Path) -> None:
    epochs, train_loss, val_metric = [], [], []
    for line in log_lines:
        fields = [f.strip() for f in line.split(",")]
        epochs.append(int(fields[0]))
        train_loss.append(float(fields[1]))
        val_metric.append(float(fields[2]))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, train_loss, marker="o", label="train loss")
    ax.plot(epochs, val_metric, marker="s", label="val metric")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save_figure(fig, path)


def forecast_overlay_figure(examples: list[dict], path: Path) -> None:
    fig, axes = plt.subplots(len(examples), 1, figsize=(7, 3 * len(examples)), squeeze=False)
    for ax, ex in zip(axes[:, 0], examples):
        hist = ex["input"]
        t_hist = range(len(hist))
        t_fut = range(len(hist), len(hist) + len(ex["target"]))
        ax.plot(t_hist, hist, color="gray", label="history")
        ax.plot(t_fut, ex["target"], color="black", label="target")
        ax.plot(t_fut, ex["prediction"], color="tab:red", linestyle="--", label="prediction")
        ax.legend(loc="upper left", fontsize=8)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    _save_figure(fig, path)


def ablation_figure(summary: dict, path: Path) -> None:
    variants = [v for v, entry in summary["variants"].items() if "mean" in entry]
    means = [summary["variants"][v]["mean"] for v in variants]
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(variants)), 4))
    xs = range(len(variants))
    ax.bar(xs, means, color="tab:blue")
    for v, x in zip(variants, xs):
        for val in summary["variants"][v]["per_seed"].values():
            ax.plot([x], [val], marker="o", color="black", markersize=3)
    ax.set_xticks(list(xs))
    ax.set_xticklabels(variants, rotation=30, ha="right")
    ax.set_ylabel(f"mean test {summary['metric']}")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    _save_figure(fig, path)


def write_run_outputs(
    out_dir: Path,
    *,
    report: MetricReport,
    per_window: list[dict],
    log_lines: list[str],
    run_name: str,
    train_cfg=None,
    examples=None,
) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out_dir / "metrics.json", report_to_json(report, train_cfg))
    write_windows_csv(out_dir / "windows.csv", per_window)
    atomic_write_text(out_dir / "train_log.txt", "\n".join(log_lines) + ("\n" if log_lines else ""))
    figures = out_dir / "figures"
    figures.mkdir(exist_ok=True)
    if log_lines:
        loss_curve_figure(log_lines, figures / "loss_curve.png")
    if examples:
        forecast_overlay_figure(examples, figures / "forecast_overlay.png")


def write_ablation_outputs(out_dir: Path, summary: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(
        out_dir / "ablation.json",
        json.dumps({"schema_version": REPORT_SCHEMA_VERSION, **summary}, sort_keys=True, indent=2)
        + "\n",
    )
    figures = out_dir / "figures"
    figures.mkdir(exist_ok=True)
    ablation_figure(summary, figures / "ablation.png")
