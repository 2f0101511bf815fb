"""Figure rendering for the CLI report paths.

Each command that writes a delimited report also drops a PNG next to it;
everything renders headless through the Agg backend.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def training_curves(records: list, path) -> None:
    """Loss and accuracy over training, with validation points overlaid."""
    train = [r for r in records if r["split"] == "train"]
    val = [r for r in records if r["split"] == "val"]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10, 4))
    if train:
        xs = [r["episode"] for r in train]
        ax_loss.plot(xs, [r["loss"] for r in train], marker="o", label="train")
        ax_acc.plot(xs, [r["accuracy"] for r in train], marker="o", label="train")
    if val:
        xs = [r["episode"] for r in val]
        ax_acc.plot(xs, [r["accuracy"] for r in val], marker="s", label="val")
    ax_loss.set_xlabel("episode")
    ax_loss.set_ylabel("episode loss")
    ax_loss.set_title("training loss")
    ax_acc.set_xlabel("episode")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(0, 1)
    ax_acc.set_title("accuracy")
    ax_acc.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def accuracy_histogram(accuracies: np.ndarray, mean: float, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(accuracies, bins=20, range=(0, 1), color="#4878a8", edgecolor="white")
    ax.axvline(mean, color="crimson", linestyle="--", label=f"mean {mean:.3f}")
    ax.set_xlabel("per-episode accuracy")
    ax.set_ylabel("episodes")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def ablation_bars(rows: list, path) -> None:
    """Bar chart of ablation results with 95% confidence whiskers.

    ``rows`` are dicts with shift_mode/value_fn/cond_mode/mean/ci95.
    """
    labels = [f"{r['shift_mode']}\n{r['value_fn']}/{r['cond_mode']}" for r in rows]
    means = [r["mean"] for r in rows]
    errs = [r["ci95"] for r in rows]
    fig, ax = plt.subplots(figsize=(max(6, 1.4 * len(rows)), 4))
    ax.bar(range(len(rows)), means, yerr=errs, capsize=4, color="#5a9e6f")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def bench_bars(stats: dict, path) -> None:
    """Median/p95 per-task timings for each conditioning mode."""
    modes = list(stats)
    fig, (ax_all, ax_cond) = plt.subplots(1, 2, figsize=(9, 4))
    for ax, med_key, p95_key, title in (
        (ax_all, "median_ms", "p95_ms", "episode wall time"),
        (ax_cond, "cond_median_ms", "cond_p95_ms", "conditioning extraction"),
    ):
        med = [stats[m][med_key] for m in modes]
        p95 = [stats[m][p95_key] for m in modes]
        xs = np.arange(len(modes))
        ax.bar(xs - 0.2, med, width=0.4, label="median")
        ax.bar(xs + 0.2, p95, width=0.4, label="p95")
        ax.set_xticks(xs)
        ax.set_xticklabels(modes)
        ax.set_ylabel("ms / task")
        ax.set_title(title)
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
