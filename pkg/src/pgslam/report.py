"""Figure rendering for pipeline runs (headless Agg backend)."""

from __future__ import annotations

import json

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from . import io as pio
from .evaluation import rigid_alignment

# PNG date metadata is suppressed so reruns produce byte-identical figures.
_SAVE_KW = {"dpi": 110, "metadata": {"Date": None}}


def _aligned_errors(est, gt):
    p_est = np.array([p.trans for p in est])
    p_gt = np.array([p.trans for p in gt])
    align = rigid_alignment(p_est, p_gt)
    return np.linalg.norm(align.apply(p_est) - p_gt, axis=1)


def render_figures(cfg, paths) -> list:
    """Write the run figures next to the delimited outputs; returns paths."""
    written = []
    _, gt = pio.read_tum(paths.gt)
    _, odometry = pio.read_tum(paths.odometry)
    _, optimized = pio.read_tum(paths.optimized)

    fig, ax = plt.subplots(figsize=(7, 6))
    for traj, label, style in [(gt, "ground truth", "k-"),
                               (odometry, "odometry", "r:"),
                               (optimized, "optimized", "b--")]:
        xy = np.array([p.trans[:2] for p in traj])
        ax.plot(xy[:, 0], xy[:, 1], style, label=label, linewidth=1.2)
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal")
    ax.legend()
    ax.set_title("trajectories (XY)")
    fig.tight_layout()
    target = paths.out / "trajectory_xy.png"
    fig.savefig(target, **_SAVE_KW)
    plt.close(fig)
    written.append(target)

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(_aligned_errors(odometry, gt), "r-", label="odometry", linewidth=1.0)
    ax.plot(_aligned_errors(optimized, gt), "b-", label="optimized", linewidth=1.0)
    ax.set_xlabel("pose index")
    ax.set_ylabel("position error after alignment [m]")
    ax.legend()
    ax.set_title("per-pose trajectory error")
    fig.tight_layout()
    target = paths.out / "error_per_pose.png"
    fig.savefig(target, **_SAVE_KW)
    plt.close(fig)
    written.append(target)

    if paths.optimize_stats.exists():
        stats = json.loads(paths.optimize_stats.read_text())
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
        ax1.semilogy(stats["chi2_trace"], "b.-")
        ax1.set_xlabel("accepted step")
        ax1.set_ylabel("chi2")
        ax1.set_title("chi2 over accepted steps")
        if stats["lambda_trace"]:
            ax2.semilogy(stats["lambda_trace"], "g.-")
        ax2.set_xlabel("solve attempt")
        ax2.set_ylabel("damping")
        ax2.set_title("LM damping trace")
        fig.tight_layout()
        target = paths.out / "optimization.png"
        fig.savefig(target, **_SAVE_KW)
        plt.close(fig)
        written.append(target)
    return written
