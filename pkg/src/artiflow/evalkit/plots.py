"""Plot rendering for report CSVs and training logs (files only, no windows)."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _read_csv(path: Path) -> tuple[list[str], list[list[float]]]:
    with open(path) as f:
        rows = list(csv.reader(f))
    header = rows[0]
    cols = [[] for _ in header]
    for row in rows[1:]:
        for i, v in enumerate(row):
            try:
                cols[i].append(float(v))
            except ValueError:
                cols[i].append(v)
    return header, cols


def plot_success_curve(csv_path: Path, out_path: Path) -> None:
    _, (steps, frac) = _read_csv(csv_path)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(steps, frac, marker="o", ms=3)
    ax.set_xlabel("step")
    ax.set_ylabel("success fraction")
    ax.set_ylim(-0.02, 1.02)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_switch_histogram(csv_path: Path, out_path: Path) -> None:
    _, (counts, episodes) = _read_csv(csv_path)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(counts, episodes)
    ax.set_xlabel("switch-grasp count")
    ax.set_ylabel("episodes")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_retries(csv_path: Path, out_path: Path) -> None:
    _, (steps, mean_trials) = _read_csv(csv_path)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(steps, mean_trials)
    ax.set_xlabel("step")
    ax.set_ylabel("mean consistency trials")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_sweep(csv_path: Path, out_path: Path) -> None:
    header, cols = _read_csv(csv_path)
    by = dict(zip(header, cols))
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(5.5, 5), sharex=True)
    ax1.plot(by["open_ratio"], by["rmse_plain"], label="no history", marker="o", ms=3)
    ax1.plot(by["open_ratio"], by["rmse_hist"], label="with history", marker="s", ms=3)
    ax1.set_ylabel("RMSE")
    ax1.legend()
    ax2.plot(by["open_ratio"], by["panel_fraction"], color="gray", marker="o", ms=3)
    ax2.set_ylabel("panel visibility")
    ax2.set_xlabel("open ratio")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_train_log(log_path: Path, out_path: Path) -> None:
    entries = [json.loads(line) for line in Path(log_path).read_text().splitlines()
               if line.strip()]
    epochs = [e["epoch"] for e in entries]
    losses = [e["loss"] for e in entries]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(epochs, losses, label="loss")
    evals = [(e["epoch"], e["wta"]) for e in entries if e.get("wta") is not None]
    if evals:
        ax.plot(*zip(*evals), marker="o", ms=4, label="WTA-RMSE")
    ax.set_xlabel("epoch")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def render_all(in_dir: str | Path, out_dir: str | Path) -> list[Path]:
    """Render every known CSV/log in `in_dir` to PNGs in `out_dir`."""
    in_dir = Path(in_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    made = []
    jobs = [("success_curve.csv", plot_success_curve, "success_curve.png"),
            ("switch_histogram.csv", plot_switch_histogram, "switch_histogram.png"),
            ("retries_per_step.csv", plot_retries, "retries_per_step.png"),
            ("train_log.jsonl", plot_train_log, "train_log.png")]
    for name, fn, out_name in jobs:
        src = in_dir / name
        if src.exists():
            fn(src, out / out_name)
            made.append(out / out_name)
    for sweep in sorted(in_dir.glob("sweep*.csv")):
        dst = out / (sweep.stem + ".png")
        plot_sweep(sweep, dst)
        made.append(dst)
    return made
