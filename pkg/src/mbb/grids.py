"""Gridded probability measures on uniform 1D grids.

Measures are stored as cell masses (not densities) on uniform grids; every
downstream solver consumes this representation.  Convex order is decided
through the one-dimensional potential-function criterion
``pi_rho(x) = integral |x - y| drho(y)``, which is exact on grids.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Grid1D",
    "DiscreteMeasure",
    "GridMismatchError",
    "potential",
    "convex_order",
    "convolve",
    "mollify",
    "resample",
    "raw_moment",
    "abs_moment",
    "wasserstein1",
]

MASS_TOL = 1e-12


class GridMismatchError(ValueError):
    """Two measures cannot be placed on a single uniform grid."""


@dataclass(frozen=True)
class Grid1D:
    """Uniform cell grid on ``[x_min, x_max]`` with ``n_cells`` cells.

    Cell ``j`` spans ``[x_min + j*h, x_min + (j+1)*h]`` and is represented by
    its center ``x_min + (j + 1/2) * h``.
    """

    x_min: float
    x_max: float
    n_cells: int

    def __post_init__(self):
        if not self.x_min < self.x_max:
            raise ValueError(f"need x_min < x_max, got [{self.x_min}, {self.x_max}]")
        if self.n_cells < 2:
            raise ValueError(f"need n_cells >= 2, got {self.n_cells}")

    @property
    def h(self) -> float:
        return (self.x_max - self.x_min) / self.n_cells

    @property
    def centers(self) -> np.ndarray:
        return self.x_min + (np.arange(self.n_cells) + 0.5) * self.h

    @property
    def edges(self) -> np.ndarray:
        return self.x_min + np.arange(self.n_cells + 1) * self.h

    def cell_of(self, x) -> np.ndarray:
        """Index of the cell containing ``x`` (clipped to the grid)."""
        idx = np.floor((np.asarray(x) - self.x_min) / self.h).astype(int)
        return np.clip(idx, 0, self.n_cells - 1)

    def to_dict(self) -> dict:
        return {"x_min": self.x_min, "x_max": self.x_max, "n_cells": self.n_cells}

    @classmethod
    def from_dict(cls, d: dict) -> "Grid1D":
        return cls(float(d["x_min"]), float(d["x_max"]), int(d["n_cells"]))


@dataclass(frozen=True)
class DiscreteMeasure:
    """Probability measure as non-negative cell masses summing to one."""

    grid: Grid1D
    weights: np.ndarray = field(repr=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (self.grid.n_cells,):
            raise ValueError(f"weights shape {w.shape} != ({self.grid.n_cells},)")
        if np.any(w < -1e-13):
            raise ValueError(f"negative weight {w.min():.3e}")
        w = np.maximum(w, 0.0)
        s = w.sum()
        if not math.isfinite(s) or s <= 0:
            raise ValueError("weights must have positive finite mass")
        if abs(s - 1.0) > MASS_TOL:
            w = w / s
        object.__setattr__(self, "weights", w)

    # -- constructors ------------------------------------------------------

    @classmethod
    def from_density(cls, grid: Grid1D, density) -> "DiscreteMeasure":
        """Ingest a continuous density by midpoint quadrature, renormalized."""
        w = np.asarray(density(grid.centers), dtype=float) * grid.h
        return cls(grid, w)

    @classmethod
    def point_mass(cls, grid: Grid1D, x: float) -> "DiscreteMeasure":
        w = np.zeros(grid.n_cells)
        w[grid.cell_of(x)] = 1.0
        return cls(grid, w)

    @classmethod
    def from_atoms(cls, grid: Grid1D, atoms, masses) -> "DiscreteMeasure":
        w = np.zeros(grid.n_cells)
        np.add.at(w, grid.cell_of(np.asarray(atoms)), np.asarray(masses, dtype=float))
        return cls(grid, w)

    @classmethod
    def gaussian(cls, grid: Grid1D, mean: float, var: float) -> "DiscreteMeasure":
        if var <= 0:
            raise ValueError("variance must be positive")
        z = (grid.centers - mean) / math.sqrt(var)
        return cls(grid, np.exp(-0.5 * z * z))

    # -- basic statistics --------------------------------------------------

    @property
    def mean(self) -> float:
        return float(self.weights @ self.grid.centers)

    @property
    def variance(self) -> float:
        c = self.grid.centers - self.mean
        return float(self.weights @ (c * c))

    def cdf(self) -> np.ndarray:
        return np.cumsum(self.weights)

    def support_cells(self, tol: float = 1e-14) -> np.ndarray:
        return np.nonzero(self.weights > tol)[0]

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return {"grid": self.grid.to_dict(), "weights": self.weights.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "DiscreteMeasure":
        return cls(Grid1D.from_dict(d["grid"]), np.asarray(d["weights"], dtype=float))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> "DiscreteMeasure":
        return cls.from_dict(json.loads(s))

    @classmethod
    def from_csv(cls, text: str) -> "DiscreteMeasure":
        """Read a two-column (center, weight) CSV on a uniform grid."""
        rows = [r for r in csv.reader(io.StringIO(text)) if r and not r[0].lstrip().startswith("#")]
        data = np.array([[float(r[0]), float(r[1])] for r in rows])
        centers, w = data[:, 0], data[:, 1]
        if len(centers) < 2:
            raise ValueError("need at least two rows")
        steps = np.diff(centers)
        h = steps.mean()
        if h <= 0 or np.any(np.abs(steps - h) > 1e-9 * max(1.0, abs(h))):
            raise ValueError("centers are not uniformly spaced")
        grid = Grid1D(centers[0] - h / 2, centers[-1] + h / 2, len(centers))
        return cls(grid, w)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf)
        for c, w in zip(self.grid.centers, self.weights):
            wr.writerow([repr(float(c)), repr(float(w))])
        return buf.getvalue()


# -- operations ------------------------------------------------------------


def potential(rho: DiscreteMeasure, x) -> np.ndarray | float:
    """One-dimensional Newtonian potential ``sum_j |x - y_j| w_j``.

    Convex, piecewise linear and 1-Lipschitz; equals ``|x - mean|`` outside
    the support hull.
    """
    xa = np.atleast_1d(np.asarray(x, dtype=float))
    vals = np.abs(xa[:, None] - rho.grid.centers[None, :]) @ rho.weights
    return vals if np.ndim(x) else float(vals[0])


def raw_moment(rho: DiscreteMeasure, k: int) -> float:
    """``sum_j y_j^k w_j`` for integer ``k >= 1``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return float(rho.weights @ rho.grid.centers**k)


def abs_moment(rho: DiscreteMeasure, k) -> float:
    """``sum_j |y_j|^k w_j``; admits non-integer ``k >= 1``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return float(rho.weights @ np.abs(rho.grid.centers) ** k)


def _common_grid(mu: DiscreteMeasure, nu: DiscreteMeasure):
    if mu.grid == nu.grid:
        return mu, nu
    hm, hn = mu.grid.h, nu.grid.h
    if abs(hm - hn) > 1e-12 * max(hm, hn):
        raise GridMismatchError(f"cell widths differ: {hm} vs {hn}")
    lo = min(mu.grid.x_min, nu.grid.x_min)
    hi = max(mu.grid.x_max, nu.grid.x_max)
    n = int(round((hi - lo) / hm))
    grid = Grid1D(lo, lo + n * hm, n)
    return resample(mu, grid), resample(nu, grid)


def resample(rho: DiscreteMeasure, grid: Grid1D) -> DiscreteMeasure:
    """Mass-conserving linear redistribution onto ``grid``.

    Each source cell is treated as uniform mass over its span and split
    among overlapping target cells; mass outside the target grid is dropped
    (callers should choose grids containing the support).
    """
    src_edges = rho.grid.edges
    tgt_edges = grid.edges
    w = np.zeros(grid.n_cells)
    lo = np.searchsorted(tgt_edges, src_edges[:-1], side="right") - 1
    hi = np.searchsorted(tgt_edges, src_edges[1:], side="right") - 1
    for j in range(rho.grid.n_cells):
        wj = rho.weights[j]
        if wj == 0.0:
            continue
        a, b = src_edges[j], src_edges[j + 1]
        for k in range(max(lo[j], 0), min(hi[j], grid.n_cells - 1) + 1):
            overlap = min(b, tgt_edges[k + 1]) - max(a, tgt_edges[k])
            if overlap > 0:
                w[k] += wj * overlap / (b - a)
    return DiscreteMeasure(grid, w)


def convex_order(mu: DiscreteMeasure, nu: DiscreteMeasure, tol: float | None = None) -> bool:
    """``mu <=_c nu``: equal means and ``pi_mu <= pi_nu`` at every center.

    Default tolerance is ``1e-8`` plus an allowance ``2h * (boundary-cell
    mass)`` for the perturbation a finite grid truncation inflicts on the
    potential functions.
    """
    mu, nu = _common_grid(mu, nu)
    h = mu.grid.h
    if tol is None:
        tail = max(mu.weights[0] + mu.weights[-1], nu.weights[0] + nu.weights[-1])
        tol = 1e-8 + 2.0 * h * tail
    if abs(mu.mean - nu.mean) > tol:
        return False
    x = mu.grid.centers
    return bool(np.all(potential(mu, x) <= potential(nu, x) + tol))


def convex_order_violation(mu: DiscreteMeasure, nu: DiscreteMeasure):
    """Location and size of the worst potential crossing ``pi_mu - pi_nu``."""
    mu, nu = _common_grid(mu, nu)
    x = mu.grid.centers
    gap = potential(mu, x) - potential(nu, x)
    j = int(np.argmax(gap))
    return float(x[j]), float(gap[j]), float(mu.mean - nu.mean)


def convolve(rho: DiscreteMeasure, sigma: DiscreteMeasure) -> DiscreteMeasure:
    """Discrete convolution ``rho * sigma``; requires equal cell widths."""
    h = rho.grid.h
    if abs(h - sigma.grid.h) > 1e-12 * max(h, sigma.grid.h):
        raise GridMismatchError(f"cell widths differ: {h} vs {sigma.grid.h}")
    w = np.convolve(rho.weights, sigma.weights)
    x_min = rho.grid.x_min + sigma.grid.x_min + h / 2
    n = rho.grid.n_cells + sigma.grid.n_cells - 1
    return DiscreteMeasure(Grid1D(x_min, x_min + n * h, n), w)


def gaussian_kernel(h: float, var: float, width: float = 8.0) -> DiscreteMeasure:
    """Centered gridded Gaussian with cell width ``h`` and variance ``var``."""
    k = max(int(math.ceil(width * math.sqrt(var) / h)), 2)
    n = 2 * k + 1
    grid = Grid1D(-(k + 0.5) * h, (k + 0.5) * h, n)
    z = grid.centers / math.sqrt(var)
    return DiscreteMeasure(grid, np.exp(-0.5 * z * z))


def mollify(rho: DiscreteMeasure, eps: float, keep_grid: bool = True) -> DiscreteMeasure:
    """Convolve with a gridded heat kernel of variance ``eps``.

    With ``keep_grid`` the result is resampled back onto ``rho.grid`` and
    renormalized (the clipped tail is Gaussian-small).  Kernels narrower than
    one cell (``eps < h**2``) are rejected as sub-grid.
    """
    h = rho.grid.h
    if eps <= 0:
        raise ValueError("eps must be positive")
    if eps < h * h:
        raise ValueError(f"kernel variance {eps} is sub-grid (< h^2 = {h*h:.3e})")
    out = convolve(rho, gaussian_kernel(h, eps))
    return resample(out, rho.grid) if keep_grid else out


def wasserstein1(mu: DiscreteMeasure, nu: DiscreteMeasure) -> float:
    """Exact 1-Wasserstein distance via CDF differences on a common grid."""
    mu, nu = _common_grid(mu, nu)
    return float(np.abs(mu.cdf() - nu.cdf()).sum() * mu.grid.h)
