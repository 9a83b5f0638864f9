"""Figure rendering for the evaluation report.

Renders alongside the plot-ready CSVs: the mean ZMP transition per control
condition, the E_z / E_f bars, and the bias-vector scatter.  Files go to
<out>/figures as PNGs.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .analysis import mean_trajectory
from .plant import TICK_DT

CONDITION_COLORS = {
    "proposed": "tab:red",
    "none": "tab:gray",
    "pd1": "tab:blue",
    "pd2": "tab:cyan",
}


def _color(name):
    return CONDITION_COLORS.get(name, None)


def fig_zx_transitions(conditions: dict, path: Path):
    """Offset-removed z_x after the push, one line per trial plus the mean."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for name, trials in sorted(conditions.items()):
        t = trials[0].t
        for tr in trials:
            ax.plot(t, tr.z_x - tr.z_x[0], color=_color(name), alpha=0.25, lw=0.8)
        ax.plot(t, mean_trajectory(trials), color=_color(name), lw=2, label=name)
    ax.axhline(0.0, color="k", lw=0.5)
    ax.set_xlabel("time after push [s]")
    ax.set_ylabel("$z_x$ (offset removed)")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def fig_metric_bars(metrics: dict, path: Path):
    names = sorted(metrics["conditions"])
    fig, axes = plt.subplots(1, 3, figsize=(9, 3))
    for ax, key, title in zip(axes, ("e_z", "e_f", "rms_du"),
                              ("$E_z$", "$E_f$", "RMS $\\Delta u$")):
        vals = [metrics["conditions"][n][key] for n in names]
        ax.bar(range(len(names)), vals,
               color=[_color(n) or "tab:green" for n in names])
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=30, fontsize=8)
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def fig_pb_scatter(labels, coords, path: Path, trajectories=None):
    """Trained bias vectors on the principal plane, optionally with online
    adaptation trajectories overlaid."""
    fig, ax = plt.subplots(figsize=(5, 5))
    coords = np.asarray(coords)
    ax.scatter(coords[:, 0], coords[:, 1], c="tab:red", zorder=3)
    for lab, (x, y) in zip(labels, coords):
        ax.annotate(lab, (x, y), textcoords="offset points", xytext=(4, 4),
                    fontsize=7)
    if trajectories:
        for lab, path_xy in trajectories.items():
            path_xy = np.asarray(path_xy)
            ax.plot(path_xy[:, 0], path_xy[:, 1], "-o", ms=2, lw=1, label=lab)
        ax.legend(fontsize=7)
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    ax.set_aspect("equal", adjustable="datalim")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def fig_episode(episode, path: Path):
    """Command and ZMP traces of one collection episode."""
    fig, axes = plt.subplots(2, 1, figsize=(7, 4), sharex=True)
    t = np.arange(len(episode)) * TICK_DT
    axes[0].plot(t, episode.controls[:, 0], lw=0.8)
    axes[0].set_ylabel(r"$\theta^{ref}$ [rad]")
    axes[1].plot(t, episode.states[:, 0], lw=0.8)
    axes[1].set_ylabel("$z_x$")
    axes[1].set_xlabel("time [s]")
    fig.suptitle(f"{episode.label} ({episode.policy})", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_all(fig_dir: Path, conditions=None, metrics=None, pb_points=None):
    fig_dir = Path(fig_dir)
    fig_dir.mkdir(parents=True, exist_ok=True)
    made = []
    if conditions:
        fig_zx_transitions(conditions, fig_dir / "zx_transitions.png")
        made.append("zx_transitions.png")
    if metrics and metrics.get("conditions"):
        fig_metric_bars(metrics, fig_dir / "metric_bars.png")
        made.append("metric_bars.png")
    if pb_points is not None:
        labels, coords = pb_points
        fig_pb_scatter(labels, coords, fig_dir / "pb_scatter.png")
        made.append("pb_scatter.png")
    return made
