"""Figure rendering for experiment reports.

All functions write PNG files next to the delimited data they visualize and
return the written path.  Rendering is headless (Agg).
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "plot_curve",
    "plot_convergence",
    "plot_profile",
    "plot_coupling",
    "plot_duality",
]


def _save(fig, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path, dpi=130, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_curve(curve, path: str, title: str = "density evolution") -> str:
    """Space-time heatmap of a measure curve (masses per cell)."""
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    extent = [curve.grid.x_min, curve.grid.x_max, float(curve.t[0]), float(curve.t[-1])]
    im = ax.imshow(
        curve.masses, origin="lower", aspect="auto", extent=extent, cmap="viridis"
    )
    ax.set_xlabel("x")
    ax.set_ylabel("t")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, label="cell mass")
    return _save(fig, path)


def plot_convergence(rows, path: str, title: str = "relaxation convergence") -> str:
    """Mesh vs |LHS - RHS| with the 3*SE band, log-log."""
    meshes = [r.mesh for r in rows]
    diffs = [max(r.diff, 1e-12) for r in rows]
    band = [3.0 * r.se for r in rows]
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    ax.loglog(meshes, diffs, "o-", label="|LHS - RHS|")
    ax.loglog(meshes, band, "s--", label="3 SE")
    ax.set_xlabel("partition mesh")
    ax.set_ylabel("gap")
    ax.set_title(title)
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    return _save(fig, path)


def plot_profile(profile, path: str) -> str:
    """Friendly-giant profile g and its separable field at a few times."""
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    ax.plot(profile.x, profile.g, label="g(x)")
    for t in (0.0, 0.5, 0.8):
        scale = (1.0 - t) ** (-1.0 / (profile.q - 1.0))
        ax.plot(profile.x, scale * profile.g, alpha=0.5, label=f"u at t={t}")
    ax.set_xlabel("x")
    ax.set_title(f"separable profile, q={profile.q}")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_coupling(plan: np.ndarray, source_grid, target_grid, path: str) -> str:
    """Heatmap of a coupling matrix."""
    fig, ax = plt.subplots(figsize=(4.8, 4.2))
    im = ax.imshow(
        plan.T,
        origin="lower",
        aspect="auto",
        extent=[source_grid.x_min, source_grid.x_max, target_grid.x_min, target_grid.x_max],
        cmap="magma",
    )
    ax.set_xlabel("x (source)")
    ax.set_ylabel("y (target)")
    ax.set_title("coupling mass")
    fig.colorbar(im, ax=ax)
    return _save(fig, path)


def plot_duality(log_rows, path: str) -> str:
    """Primal value and dual bound along solver iterations."""
    it = [r[0] for r in log_rows]
    val = [r[1] for r in log_rows]
    dual = [r[2] for r in log_rows]
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    ax.plot(it, val, label="primal value")
    ax.plot(it, dual, label="dual bound")
    ax.set_xlabel("iteration")
    ax.set_title("duality bracket")
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, path)
