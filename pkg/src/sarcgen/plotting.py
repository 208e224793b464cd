"""Figures written next to the JSON reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
}


def figsize(scale=1.0, ratio=None):
    golden = (np.sqrt(5.0) - 1.0) / 2.0
    width = 6.0 * scale
    return width, width * (ratio or golden)


def save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_distributions(series: dict, path, xlabel="score", title=None) -> Path:
    """Overlaid 20-bin histograms (as densities) with dashed mean markers.

    ``series`` maps a label to a DistributionStats or its dict form.
    """
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(0.8))
        for i, (label, stats) in enumerate(series.items()):
            stats = stats if isinstance(stats, dict) else stats.to_dict()
            hist = np.asarray(stats["histogram"], dtype=float)
            edges = np.linspace(0.0, 1.0, len(hist) + 1)
            density = hist / max(hist.sum(), 1.0)
            color = f"C{i}"
            ax.stairs(density, edges, fill=True, alpha=0.35, color=color,
                      label=f"{label} (mean {stats['mean']:.3f}, std {stats['std']:.3f})")
            ax.axvline(stats["mean"], color=color, linestyle="--", linewidth=1)
        ax.set_xlim(0, 1)
        ax.set_xlabel(xlabel)
        ax.set_ylabel("fraction")
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
        return save(fig, path)


def plot_training_curves(records, path) -> Path:
    """Loss components (left) and mean anchor reward / lambda_ppo (right) per step."""
    rows = [r if isinstance(r, dict) else r.__dict__ for r in records]
    steps = [r["step"] for r in rows]
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_rew) = plt.subplots(1, 2, figsize=figsize(1.3, 0.4))
        for key in ("total", "ce", "ppo", "cl"):
            ax_loss.plot(steps, [r[key] for r in rows], label=key, linewidth=1)
        ax_loss.set_xlabel("step")
        ax_loss.set_ylabel("loss")
        ax_loss.legend(frameon=False)
        rewards = [(s, r["mean_reward"]) for s, r in zip(steps, rows) if r.get("mean_reward") is not None]
        if rewards:
            ax_rew.plot(*zip(*rewards), label="mean anchor reward", linewidth=1)
        ax_rew.plot(steps, [r["lambda_ppo"] for r in rows], label="lambda_ppo", linestyle=":", linewidth=1)
        ax_rew.set_xlabel("step")
        ax_rew.set_ylim(-0.05, 1.05)
        ax_rew.legend(frameon=False)
        return save(fig, path)
