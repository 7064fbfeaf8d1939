"""Figure rendering for rollout traces, codebooks, and training logs.

Every renderer writes an SVG next to whatever delimited output produced it,
so a report directory is self-contained: CSVs for numbers, SVGs for eyes.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "vqpolicy"

import matplotlib.pyplot as plt
import numpy as np

from .envs import DETOUR_START, DETOUR_TARGET, FOUR_GOALS, GOAL_RADIUS, OBSTACLE_RADIUS


def _arena(ax) -> None:
    ax.set_xlim(-1.05, 1.05)
    ax.set_ylim(-1.05, 1.05)
    ax.set_aspect("equal")
    ax.add_patch(plt.Rectangle((-1, -1), 2, 2, fill=False, color="0.6", lw=0.8))


def plot_trajectories(results, env_kind: str, path: str | Path) -> Path:
    """Overlay episode paths on the arena with the env's landmarks."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5, 5))
    _arena(ax)
    if env_kind == "four_goal":
        for i, (gx, gy) in enumerate(FOUR_GOALS):
            ax.add_patch(plt.Circle((gx, gy), GOAL_RADIUS, color="tab:green", alpha=0.3))
            ax.annotate(str(i), (gx, gy), ha="center", va="center", fontsize=8)
    elif env_kind == "detour":
        ax.add_patch(plt.Circle((0, 0), OBSTACLE_RADIUS, color="tab:red", alpha=0.3))
        ax.add_patch(plt.Circle(DETOUR_TARGET, GOAL_RADIUS, color="tab:green", alpha=0.3))
        ax.plot(*DETOUR_START, marker="s", color="k", ms=4)
    cmap = plt.get_cmap("viridis")
    drawn = 0
    for i, r in enumerate(results):
        if r.obs is None:
            continue
        xy = r.obs[:, :2]
        ax.plot(xy[:, 0], xy[:, 1], lw=0.8, alpha=0.6, color=cmap(i / max(len(results) - 1, 1)))
        drawn += 1
    ax.set_title(f"{env_kind}: {drawn} episodes")
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)
    return path


def plot_codebook(centers: np.ndarray, codes: np.ndarray, path: str | Path) -> Path:
    """Scatter decoded action centers (first two dims), colored by coarse code."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5, 5))
    sc = ax.scatter(centers[:, 0], centers[:, 1], c=codes[:, 0], cmap="tab20", s=18)
    ax.set_xlabel("action dim 0")
    ax.set_ylabel("action dim 1")
    ax.set_title(f"{len(centers)} code combinations")
    fig.colorbar(sc, ax=ax, label="coarse code")
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)
    return path


def plot_training_log(csv_path: str | Path, out_path: str | Path) -> Path:
    """Line plot of every numeric column in a training CSV against step."""
    csv_path, out_path = Path(csv_path), Path(out_path)
    rows = csv_path.read_text().strip().splitlines()
    header = rows[0].split(",")
    data = np.array([[float(v) for v in line.split(",")] for line in rows[1:]])
    fig, ax = plt.subplots(figsize=(6, 4))
    for j, name in enumerate(header[1:], start=1):
        ax.plot(data[:, 0], data[:, j], lw=1.0, label=name)
    ax.set_xlabel(header[0])
    ax.legend(fontsize=7)
    ax.set_title(csv_path.name)
    fig.savefig(out_path, format="svg", bbox_inches="tight")
    plt.close(fig)
    return out_path
