"""Matplotlib figures for batch reports (headless backend)."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_histograms(hists: Mapping[str, Sequence[tuple[float, float, int]]], path: str | Path) -> None:
    fig, axes = plt.subplots(1, len(hists), figsize=(4.5 * len(hists), 3.2), squeeze=False)
    for ax, (name, rows) in zip(axes[0], hists.items()):
        lefts = [lo for lo, _, _ in rows]
        widths = [hi - lo for lo, hi, _ in rows]
        ax.bar(lefts, [n for _, _, n in rows], width=widths, align="edge", color="#4a78c2", edgecolor="white")
        ax.set_xlim(0, 1)
        ax.set_xlabel(name)
        ax.set_ylabel("videos")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def plot_scatter(labels: Sequence[float], scores: Sequence[float], threshold: float, path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(4.2, 4.0))
    ax.scatter(labels, scores, s=14, color="#c2564a")
    ax.axhline(threshold, color="gray", linestyle="--", linewidth=1)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel("reference score")
    ax.set_ylabel("S_overall")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
