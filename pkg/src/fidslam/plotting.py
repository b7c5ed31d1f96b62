"""Report figures written next to the solver output (headless Agg backend)."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_trajectory(path, solved, truth=None, dead_reckoning=None, tags=None, title="trajectory"):
    """Top-down view. ``solved``/``truth``/``dead_reckoning``: lists of Pose."""
    fig, ax = plt.subplots(figsize=(6, 6))
    for poses, style, label in ((dead_reckoning, "c-", "odometry only"), (truth, "k--", "ground truth"),
                                (solved, "m-", "solved")):
        if poses:
            xy = np.array([p.t[:2] for p in poses])
            ax.plot(xy[:, 0], xy[:, 1], style, lw=1.2, label=label)
    if tags:
        for tid, (pose, source) in tags.items():
            c = "tab:red" if source == "prior" else "tab:blue"
            ax.plot(*pose.t[:2], "s", color=c, ms=5)
            ax.annotate(str(tid), pose.t[:2], fontsize=7, xytext=(3, 3), textcoords="offset points")
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_factor_errors(path, rows, title="per-factor error"):
    """``rows``: diagnostics dicts with time, factor_kind, error, verdict."""
    fig, ax = plt.subplots(figsize=(8, 3.5))
    colors = {"accepted": "tab:green", "rejected": "tab:red", "pending": "tab:gray"}
    for verdict, color in colors.items():
        pts = [(float(r["time"]), float(r["error"])) for r in rows
               if r["verdict"] == verdict and math.isfinite(float(r["error"]))]
        if pts:
            t, e = np.array(pts).T
            ax.semilogy(t, np.maximum(e, 1e-12), ".", ms=3, color=color, label=verdict)
    ax.set_xlabel("time [s]")
    ax.set_ylabel("whitened error")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    if ax.get_legend_handles_labels()[0]:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
