"""Delimited reports and the matplotlib figures rendered next to them.

Every report path writes a CSV and a PNG side by side; figures carry no
timestamps so reruns are byte-stable.
"""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, png_path) -> None:
    fig.savefig(png_path, dpi=110)
    plt.close(fig)


def write_timing(rows, csv_path, png_path=None) -> None:
    """rows: (backend, frame, milliseconds, warmup). Figure uses a log y
    axis with the warm-up frame marked."""
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["backend", "frame", "milliseconds", "warmup"])
        for backend, frame, ms, warm in rows:
            w.writerow([backend, frame, f"{ms:.6f}", warm])
    if png_path is None:
        return
    fig, ax = plt.subplots(figsize=(6, 4))
    backends = sorted({r[0] for r in rows})
    for name in backends:
        frames = [r[1] for r in rows if r[0] == name]
        ms = [r[2] for r in rows if r[0] == name]
        ax.plot(frames, ms, marker="o", markersize=3, label=name)
        warm = [(r[1], r[2]) for r in rows if r[0] == name and r[3]]
        if warm:
            ax.plot([w[0] for w in warm], [w[1] for w in warm], "rx",
                    markersize=9, label=f"{name} warm-up")
    ax.set_yscale("log")
    ax.set_xlabel("frame")
    ax.set_ylabel("render time [ms]")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, png_path)


def write_loss(history, csv_path, png_path=None) -> None:
    """history: (N,2) array of (iteration, loss)."""
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss"])
        for it, value in history:
            w.writerow([int(it), f"{value:.8e}"])
    if png_path is None:
        return
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(history[:, 0], history[:, 1], lw=0.7)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("clamp loss")
    fig.tight_layout()
    _save(fig, png_path)


def write_metrics(entries, csv_path, png_path=None) -> None:
    """entries: (metric, value, parameters) triples."""
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value", "parameters"])
        for metric, value, params in entries:
            w.writerow([metric, f"{value:.8e}", params])
    if png_path is None:
        return
    fig, ax = plt.subplots(figsize=(6, 4))
    names = [e[0] for e in entries]
    values = [e[1] for e in entries]
    ax.bar(range(len(names)), values, color="#4878a8")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("value")
    fig.tight_layout()
    _save(fig, png_path)
