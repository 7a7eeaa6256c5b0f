"""Static figures for CLI reports, rendered to image files with the Agg backend."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .detection import MarkingType  # noqa: E402

COLORS = {
    MarkingType.LANELINE.label: "tab:blue",
    MarkingType.ROADEDGE.label: "tab:red",
    MarkingType.STOPLINE.label: "tab:green",
}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_snapshot(lines, path, title: str = "", centerlines=(), gt_lines=()) -> None:
    """Typed polylines ``(type label, points)`` over optional groundtruth, top-down."""
    fig, ax = plt.subplots(figsize=(7, 7))
    for _, pts in gt_lines:
        ax.plot(pts[:, 0], pts[:, 1], color="0.82", lw=4, zorder=0)
    for label, pts in lines:
        ax.plot(pts[:, 0], pts[:, 1], color=COLORS.get(label, "k"), lw=1.5)
    for c in centerlines:
        if len(c):
            ax.plot(c[:, 0], c[:, 1], color="tab:purple", lw=0.8, ls="--")
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_title(title)
    _save(fig, path)


def plot_series(rows: list[dict], path, key: str = "f1") -> None:
    """One metric per frame."""
    fig, ax = plt.subplots(figsize=(8, 3.5))
    x = [r["frame"] for r in rows]
    y = [np.nan if r.get(key) is None else r[key] for r in rows]
    ax.plot(x, y, lw=1)
    ax.set_xlabel("frame")
    ax.set_ylabel(key)
    ax.grid(alpha=0.3)
    _save(fig, path)


def plot_profile(summary: dict, path) -> None:
    """Mean and p99 time per stage."""
    stages = [s for s in summary if s != "total"]
    mean = [summary[s]["mean"] for s in stages]
    p99 = [summary[s]["p99"] for s in stages]
    fig, ax = plt.subplots(figsize=(7, 3.5))
    x = np.arange(len(stages))
    ax.bar(x - 0.2, mean, 0.4, label="mean")
    ax.bar(x + 0.2, p99, 0.4, label="p99")
    ax.set_xticks(x, stages, rotation=30)
    ax.set_ylabel("ms")
    ax.set_title(f"total mean {summary['total']['mean']:.2f} ms")
    ax.legend()
    _save(fig, path)


def plot_ablation(rows: list[dict], path) -> None:
    """Precision, recall and F1 per parameter setting."""
    labels = [r["setting"] for r in rows]
    fig, ax = plt.subplots(figsize=(max(5, 1.3 * len(rows)), 3.8))
    x = np.arange(len(rows))
    for k, key in enumerate(("precision", "recall", "f1")):
        vals = [np.nan if r[key] is None else r[key] for r in rows]
        ax.bar(x + (k - 1) * 0.27, vals, 0.27, label=key)
    ax.set_xticks(x, labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("%")
    ax.set_ylim(0, 105)
    ax.legend(loc="lower right")
    _save(fig, path)
