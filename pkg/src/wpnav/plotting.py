"""Static SVG figures: smoothed training curves, path overlays and metric bars."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import MalformedInput  # noqa: E402
from .evaluation import EvalReport, ema_curve  # noqa: E402
from .grid import OccupancyGrid  # noqa: E402

# fixed ids in the SVG so identical inputs give identical files
matplotlib.rcParams["svg.hashsalt"] = "wpnav"

CURVE_METRICS = ("success", "spl", "ret", "steps")


def _save(fig, out) -> None:
    fig.savefig(out, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_curves(runs, out, metric: str = "success", alpha: float = 0.001, x_axis: str = "episode"):
    """``runs`` is a list of (label, [EpisodeLog]); one EMA-smoothed line per run."""
    if metric not in CURVE_METRICS:
        raise ValueError(f"metric must be one of {CURVE_METRICS}")
    if not runs:
        raise MalformedInput("no training logs to plot")
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, logs in runs:
        if not logs:
            raise MalformedInput(f"training log {label!r} is empty")
        y = ema_curve([getattr(e, metric) for e in logs], alpha)
        x = [e.env_steps for e in logs] if x_axis == "steps" else np.arange(len(logs))
        ax.plot(x, y, label=label, linewidth=1.2)
    ax.set_xlabel("environment steps" if x_axis == "steps" else "episode")
    ax.set_ylabel(f"{metric} (EMA, alpha={alpha:g})")
    ax.grid(alpha=0.3)
    ax.legend()
    _save(fig, out)
    return fig


def plot_paths(grid: OccupancyGrid, trajectories: dict, out, goals: dict | None = None):
    """Map background with one colored path per episode; start (green) and goal (blue) squares."""
    if not trajectories:
        raise MalformedInput("no trajectories to plot")
    fig, ax = plt.subplots(figsize=(5, 5))
    cs = grid.cell_size
    ax.imshow(grid.cells, cmap="Greys", origin="lower", vmin=0, vmax=1,
              extent=(0, grid.width * cs, 0, grid.height * cs))
    colors = plt.cm.tab10(np.linspace(0, 1, max(len(trajectories), 2)))
    for color, (eid, rows) in zip(colors, sorted(trajectories.items())):
        ax.plot(rows[:, 1], rows[:, 2], color=color, linewidth=1.2, label=f"episode {eid}")
        ax.plot(rows[0, 1], rows[0, 2], marker="s", color="green", markersize=7, linestyle="none")
        gx, gy = goals[eid] if goals and eid in goals else rows[-1, 1:3]
        ax.plot(gx, gy, marker="s", color="blue", markersize=7, linestyle="none")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.set_aspect("equal")
    if len(trajectories) <= 10:
        ax.legend(fontsize=7, loc="upper right")
    _save(fig, out)
    return fig


def plot_bars(reports: list[EvalReport], out):
    """Grouped SPL / success-rate bars, one group per report."""
    if not reports:
        raise MalformedInput("no reports to plot")
    labels = [r.label or f"run {i}" for i, r in enumerate(reports)]
    x = np.arange(len(reports))
    fig, ax = plt.subplots(figsize=(max(4, 1.4 * len(reports)), 4))
    ax.bar(x - 0.2, [r.mean_spl for r in reports], 0.4, label="SPL")
    ax.bar(x + 0.2, [r.mean_success for r in reports], 0.4, label="success rate")
    ax.set_xticks(x)
    ax.set_xticklabels(labels)
    ax.set_ylim(0, 1)
    ax.legend()
    _save(fig, out)
    return fig
