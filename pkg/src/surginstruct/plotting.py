"""Figures for experiment reports (matplotlib, file output only)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 3.6),
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_xe_curves(histories: dict, path) -> Path:
    """Per-epoch train (solid) and validation (dashed) XE loss for each model family."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, hist in histories.items():
            xe = [h for h in hist if h["phase"] == "xe"]
            ep = [h["epoch"] for h in xe]
            line, = ax.plot(ep, [h["train_loss"] for h in xe], marker="o", ms=3, label=f"{name} train")
            if all("val_loss" in h for h in xe):
                ax.plot(ep, [h["val_loss"] for h in xe], ls="--", color=line.get_color(), label=f"{name} val")
        ax.set_xlabel("epoch")
        ax.set_ylabel("cross-entropy (nats/token)")
        ax.legend(ncol=2)
        return _save(fig, path)


def plot_rewards(histories: dict, path) -> Path:
    """Mean sampled and greedy CIDEr-D reward per self-critical epoch."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, hist in histories.items():
            rl = [h for h in hist if h["phase"] == "scst"]
            if not rl:
                continue
            ep = list(range(1, len(rl) + 1))
            line, = ax.plot(ep, [h["reward_greedy"] for h in rl], marker="o", ms=3, label=f"{name} greedy")
            ax.plot(ep, [h["reward_sampled"] for h in rl], ls="--", color=line.get_color(), label=f"{name} sampled")
        ax.set_xlabel("self-critical epoch")
        ax.set_ylabel("CIDEr-D reward")
        ax.legend(ncol=2)
        return _save(fig, path)


def plot_metric_bars(rows: dict, path, columns=("B1", "B2", "B3", "B4", "C", "M", "R")) -> Path:
    """Grouped bars: one group per metric column, one bar per regime (scores x100)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(7.5, 3.6))
        names = list(rows)
        width = 0.8 / max(1, len(names))
        for i, name in enumerate(names):
            vals = [rows[name][c] for c in columns]
            xs = [j + (i - (len(names) - 1) / 2) * width for j in range(len(columns))]
            ax.bar(xs, vals, width=width, label=name)
        ax.set_xticks(range(len(columns)))
        ax.set_xticklabels(columns)
        ax.set_ylabel("score x100")
        ax.legend(ncol=3, loc="upper left")
        return _save(fig, path)
