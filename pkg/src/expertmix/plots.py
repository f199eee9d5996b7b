"""Figure rendering for pipeline and ablation outputs.

Figures are written next to the delimited outputs they visualize; the CSVs
remain the canonical data, the PNGs are for eyeballing runs.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def save_per_class_curve(sorted_accuracies, path, title="Per-class top-1 accuracy") -> None:
    """Plot the descending per-class accuracy curve."""
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    ax.plot(range(1, len(sorted_accuracies) + 1), sorted_accuracies, lw=1.5)
    ax.set_xlabel("class rank (best to worst)")
    ax.set_ylabel("top-1 accuracy")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_metric_curve(xs, series: dict[str, list], xlabel: str, path) -> None:
    """Plot one line per metric series against a shared x axis."""
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    for name, values in series.items():
        ax.plot(xs, values, marker="o", label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("accuracy")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_loss_trajectories(trajectories: dict[str, list], path) -> None:
    """Plot training objective curves, one line per model."""
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    for name, values in trajectories.items():
        ax.plot(range(len(values)), values, label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("objective")
    ax.grid(True, alpha=0.3)
    if len(trajectories) <= 12:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
