"""Forward Fokker-Planck solver, weak-form residuals and SDE simulation.

The equation ``d rho / dt = 1/2 * d^2(a rho) / dx^2`` is discretized in the
divergence form of its weak formulation: the spatial operator is the centered
second difference of the product ``a * rho`` with the product extended by
zero outside the grid.  Mass is then conserved exactly as long as ``a rho``
vanishes in the boundary cells, and means drift only through boundary flux.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded

from .grids import DiscreteMeasure, Grid1D, mollify, wasserstein1
from .rng import chunk_normals, chunk_uniforms

__all__ = [
    "CFLViolationError",
    "NegativeDensityError",
    "DiffusionField",
    "MeasureCurve",
    "TestFunction",
    "PathEnsemble",
    "solve_fpe",
    "weak_residual",
    "simulate_sde",
    "marginal_distance",
]


class CFLViolationError(RuntimeError):
    """Explicit step violates ``max(a) * dt / h^2 <= 1``."""


class NegativeDensityError(RuntimeError):
    """A step produced densities below -1e-12 even after retries."""


@dataclass(frozen=True)
class DiffusionField:
    """Diffusion coefficient ``a(t, x) >= 0`` sampled on a space-time grid.

    Evaluation between nodes is bilinear; outside the spatial nodes the
    coefficient is extended by zero, and time is clamped to the sampled
    range.  Values are clipped at zero on evaluation.
    """

    t: np.ndarray = field(repr=False)
    x: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        x = np.asarray(self.x, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if v.shape != (len(t), len(x)):
            raise ValueError(f"values shape {v.shape} != ({len(t)}, {len(x)})")
        if np.any(np.diff(t) <= 0) or np.any(np.diff(x) <= 0):
            raise ValueError("t and x must be strictly increasing")
        if not np.all(np.isfinite(v)):
            raise ValueError("diffusion values must be finite")
        if np.any(v < 0):
            raise ValueError("diffusion values must be >= 0")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, value: float, t=None, x=None) -> "DiffusionField":
        t = np.asarray([0.0, 1.0] if t is None else t, dtype=float)
        x = np.asarray([-1.0, 1.0] if x is None else x, dtype=float)
        return cls(t, x, np.full((len(t), len(x)), float(value)))

    @classmethod
    def from_function(cls, fn, t, x) -> "DiffusionField":
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        vals = np.asarray(fn(t[:, None], x[None, :]), dtype=float)
        return cls(t, x, np.broadcast_to(vals, (len(t), len(x))).copy())

    def row(self, t: float) -> np.ndarray:
        """Values at time ``t`` on the spatial nodes (linear in t, clamped)."""
        tt = min(max(float(t), self.t[0]), self.t[-1])
        k = min(np.searchsorted(self.t, tt, side="right") - 1, len(self.t) - 2)
        k = max(k, 0)
        w = (tt - self.t[k]) / (self.t[k + 1] - self.t[k])
        return (1 - w) * self.values[k] + w * self.values[k + 1]

    def at(self, t: float, x) -> np.ndarray:
        """Bilinear evaluation, zero outside the spatial hull, clipped at 0."""
        row = self.row(t)
        out = np.interp(np.asarray(x, dtype=float), self.x, row, left=0.0, right=0.0)
        return np.maximum(out, 0.0)

    def sample(self, t, x) -> np.ndarray:
        """Bilinear evaluation with per-element times (both arrays alike)."""
        t = np.clip(np.asarray(t, dtype=float), self.t[0], self.t[-1])
        x = np.asarray(x, dtype=float)
        k = np.clip(np.searchsorted(self.t, t, side="right") - 1, 0, len(self.t) - 2)
        wt = (t - self.t[k]) / (self.t[k + 1] - self.t[k])
        j = np.clip(np.searchsorted(self.x, x, side="right") - 1, 0, len(self.x) - 2)
        wx = np.clip((x - self.x[j]) / (self.x[j + 1] - self.x[j]), 0.0, 1.0)
        v = (1 - wt) * ((1 - wx) * self.values[k, j] + wx * self.values[k, j + 1]) + wt * (
            (1 - wx) * self.values[k + 1, j] + wx * self.values[k + 1, j + 1]
        )
        outside = (x < self.x[0]) | (x > self.x[-1])
        return np.where(outside, 0.0, np.maximum(v, 0.0))

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(self.values)

    def max_value(self) -> float:
        return float(self.values.max())

    def to_dict(self) -> dict:
        return {"t": self.t.tolist(), "x": self.x.tolist(), "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionField":
        return cls(np.asarray(d["t"]), np.asarray(d["x"]), np.asarray(d["values"]))

    def to_csv(self) -> str:
        lines = ["t,x,value"]
        for k, tk in enumerate(self.t):
            for j, xj in enumerate(self.x):
                lines.append(f"{float(tk)!r},{float(xj)!r},{float(self.values[k, j])!r}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class MeasureCurve:
    """Curve of gridded measures ``t -> rho_t`` on a fixed grid."""

    t: np.ndarray = field(repr=False)
    grid: Grid1D
    masses: np.ndarray = field(repr=False)

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        m = np.asarray(self.masses, dtype=float)
        if m.shape != (len(t), self.grid.n_cells):
            raise ValueError("masses shape mismatch")
        if np.any(np.diff(t) <= 0):
            raise ValueError("times must be strictly increasing")
        sums = m.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-9):
            raise ValueError(f"slice mass off by {np.abs(sums - 1.0).max():.2e}")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "masses", m)

    def measure(self, k: int) -> DiscreteMeasure:
        return DiscreteMeasure(self.grid, np.maximum(self.masses[k], 0.0))

    @property
    def n_times(self) -> int:
        return len(self.t)

    def means(self) -> np.ndarray:
        return self.masses @ self.grid.centers

    def variances(self) -> np.ndarray:
        c = self.grid.centers
        return self.masses @ (c * c) - self.means() ** 2

    def to_dict(self) -> dict:
        return {"t": self.t.tolist(), "grid": self.grid.to_dict(), "masses": self.masses.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MeasureCurve":
        return cls(np.asarray(d["t"]), Grid1D.from_dict(d["grid"]), np.asarray(d["masses"]))

    def to_csv(self) -> str:
        lines = ["t,x,value"]
        for k, tk in enumerate(self.t):
            for j, xj in enumerate(self.grid.centers):
                lines.append(f"{float(tk)!r},{float(xj)!r},{float(self.masses[k, j])!r}")
        return "\n".join(lines) + "\n"


def second_difference(v: np.ndarray) -> np.ndarray:
    """Centered second difference with zero extension outside the grid."""
    out = -2.0 * v
    out[:-1] += v[1:]
    out[1:] += v[:-1]
    return out


def _is_point_like(mu: DiscreteMeasure) -> bool:
    return len(mu.support_cells()) <= 2


def solve_fpe(
    mu0: DiscreteMeasure,
    a: DiffusionField,
    scheme: str = "implicit",
    t_nodes=None,
    max_retries: int = 6,
) -> MeasureCurve:
    """March ``d rho/dt = 1/2 d^2(a rho)/dx^2`` forward from ``mu0``.

    Point-mass initial data are mollified with variance ``4 h^2`` first (a
    delta is not representable for a second-order scheme).  The implicit
    scheme solves one tridiagonal system per step and is unconditionally
    stable; the explicit scheme enforces the CFL bound ``max(a) dt/h^2 <= 1``.
    """
    if scheme not in ("explicit", "implicit"):
        raise ValueError(f"unknown scheme {scheme!r}")
    grid = mu0.grid
    h = grid.h
    t = np.asarray(a.t if t_nodes is None else t_nodes, dtype=float)
    if len(t) < 2:
        raise ValueError("need at least two time nodes")
    if _is_point_like(mu0):
        mu0 = mollify(mu0, 4.0 * h * h)
    out = np.empty((len(t), grid.n_cells))
    out[0] = mu0.weights
    rho = mu0.weights.copy()
    centers = grid.centers
    for k in range(len(t) - 1):
        dt = t[k + 1] - t[k]
        if scheme == "explicit":
            a_row = a.at(t[k], centers)
            if a_row.max() * dt / (h * h) > 1.0 + 1e-12:
                raise CFLViolationError(
                    f"max(a)*dt/h^2 = {a_row.max() * dt / (h*h):.3f} > 1 at t={t[k]:.4f}"
                )
            rho_new = _explicit_step(rho, a_row, dt, h)
        else:
            rho_new = _implicit_step(rho, a, t[k], dt, h, centers)
        if rho_new.min() < -1e-12:
            rho_new = _substep_retry(rho, a, t[k], dt, h, centers, scheme, max_retries)
        rho = rho_new
        out[k + 1] = rho
    drift = np.abs(out.sum(axis=1) - 1.0).max()
    if drift > 1e-9:
        raise RuntimeError(
            f"mass drifted by {drift:.2e}: the product a*rho reaches the grid "
            "boundary; widen the grid or shorten the horizon"
        )
    return MeasureCurve(t, grid, out)


def _explicit_step(rho, a_row, dt, h):
    return rho + 0.5 * dt / (h * h) * second_difference(a_row * rho)


def _implicit_step(rho, a, t_k, dt, h, centers):
    # Backward step: (I - dt/(2 h^2) * D2 diag(a^{k+1})) rho^{k+1} = rho^k.
    a_new = a.at(t_k + dt, centers)
    r = 0.5 * dt / (h * h)
    n = len(rho)
    ab = np.zeros((3, n))
    ab[0, 1:] = -r * a_new[1:]  # superdiagonal
    ab[1] = 1.0 + 2.0 * r * a_new
    ab[2, :-1] = -r * a_new[:-1]  # subdiagonal
    return solve_banded((1, 1), ab, rho)


def _substep_retry(rho, a, t_k, dt, h, centers, scheme, max_retries):
    for m in range(1, max_retries + 1):
        sub = 2**m
        r = rho.copy()
        ok = True
        for s in range(sub):
            ts = t_k + s * dt / sub
            if scheme == "explicit":
                r = _explicit_step(r, a.at(ts, centers), dt / sub, h)
            else:
                r = _implicit_step(r, a, ts, dt / sub, h, centers)
            if r.min() < -1e-12:
                ok = False
                break
        if ok:
            return r
    raise NegativeDensityError(f"negative density persists after {max_retries} halvings")


@dataclass(frozen=True)
class TestFunction:
    """Test function with its time derivative and spatial second derivative."""

    __test__ = False  # keep pytest from collecting the PDE term

    value: callable
    dt: callable
    dxx: callable

    @classmethod
    def constant(cls):
        return cls(lambda t, x: np.ones_like(x), lambda t, x: np.zeros_like(x), lambda t, x: np.zeros_like(x))

    @classmethod
    def linear(cls):
        return cls(lambda t, x: x, lambda t, x: np.zeros_like(x), lambda t, x: np.zeros_like(x))

    @classmethod
    def quadratic(cls):
        return cls(lambda t, x: x * x, lambda t, x: np.zeros_like(x), lambda t, x: 2.0 * np.ones_like(x))

    @classmethod
    def bump(cls, center: float = 0.0, width: float = 1.0):
        """Gaussian bump ``exp(-((x-c)/w)^2 / 2)``, time independent."""

        def val(t, x):
            z = (x - center) / width
            return np.exp(-0.5 * z * z)

        def dxx(t, x):
            z = (x - center) / width
            return (z * z - 1.0) / (width * width) * np.exp(-0.5 * z * z)

        return cls(val, lambda t, x: np.zeros_like(x), dxx)


def weak_residual(curve: MeasureCurve, a: DiffusionField, phi: TestFunction) -> float:
    """Defect of the weak Fokker-Planck identity under midpoint quadrature.

    Computes ``| int (d_t phi + a/2 d_xx phi) drho dt - (int phi_1 drho_1 -
    int phi_0 drho_0) |`` with interval-midpoint time quadrature and averaged
    slice masses.
    """
    x = curve.grid.centers
    lhs = 0.0
    for k in range(curve.n_times - 1):
        dt = curve.t[k + 1] - curve.t[k]
        tm = 0.5 * (curve.t[k] + curve.t[k + 1])
        rho_m = 0.5 * (curve.masses[k] + curve.masses[k + 1])
        integrand = phi.dt(tm, x) + 0.5 * a.at(tm, x) * phi.dxx(tm, x)
        lhs += dt * float(integrand @ rho_m)
    rhs = float(phi.value(curve.t[-1], x) @ curve.masses[-1]) - float(
        phi.value(curve.t[0], x) @ curve.masses[0]
    )
    return abs(lhs - rhs)


@dataclass(frozen=True)
class PathEnsemble:
    """Monte-Carlo martingale paths with their diffusion record.

    ``X[i, k]`` is the position of path ``i`` at record time ``t[k]`` and
    ``qv_rate[i, k] = a(t_k, X[i, k])`` samples the quadratic-variation
    density.  Paths are driftless Euler-Maruyama, so increments have
    conditional mean zero by construction.
    """

    seed: int
    dt: float
    t: np.ndarray = field(repr=False)
    X: np.ndarray = field(repr=False)
    qv_rate: np.ndarray = field(repr=False)

    @property
    def n_paths(self) -> int:
        return self.X.shape[0]

    def index_of_time(self, s: float, snap_tol: float = 1e-9):
        k = int(np.argmin(np.abs(self.t - s)))
        snapped = abs(self.t[k] - s) > snap_tol
        return k, snapped

    def positions_at(self, s: float) -> np.ndarray:
        k, _ = self.index_of_time(s)
        return np.asarray(self.X[:, k], dtype=float)

    def mean_p_energy(self, p: float) -> float:
        """Empirical ``E[int |qv_rate|^p dt]`` by trapezoid over record times."""
        vals = np.trapezoid(np.asarray(self.qv_rate, dtype=float) ** p, self.t, axis=1)
        return float(vals.mean())


def simulate_sde(
    mu0: DiscreteMeasure,
    a: DiffusionField,
    n_paths: int,
    dt: float,
    seed: int,
    n_record: int = 257,
    chunk: int = 16384,
) -> PathEnsemble:
    """Euler-Maruyama ensemble ``dX = sqrt(a(t, X)) dW`` started from ``mu0``.

    Starting points sample the cell and then a uniform position inside it.
    Each path consumes its own counter-based stream keyed by
    ``(seed, path_index)``; results do not depend on chunking.  Positions and
    the diffusion record are kept at ``n_record`` equispaced times (stored as
    float32; statistical errors dominate well before that precision).
    """
    n_steps = max(int(round(1.0 / dt)), 1)
    dt = 1.0 / n_steps
    stride = max(n_steps // max(min(n_record - 1, n_steps), 1), 1)
    rec_steps = np.arange(0, n_steps + 1, stride)
    if rec_steps[-1] != n_steps:
        rec_steps = np.append(rec_steps, n_steps)
    t_rec = rec_steps * dt

    edges = mu0.grid.edges
    cdf = np.concatenate([[0.0], np.cumsum(mu0.weights)])
    cdf[-1] = 1.0

    X_rec = np.empty((n_paths, len(rec_steps)), dtype=np.float32)
    Q_rec = np.empty((n_paths, len(rec_steps)), dtype=np.float32)

    sqrt_dt = math.sqrt(dt)
    for lo in range(0, n_paths, chunk):
        hi = min(lo + chunk, n_paths)
        uni = chunk_uniforms(seed, lo, hi, 2)
        # inverse-CDF start: pick the cell, then a uniform offset inside it
        cells = np.searchsorted(cdf, uni[:, 0], side="right") - 1
        cells = np.clip(cells, 0, mu0.grid.n_cells - 1)
        x = edges[cells] + uni[:, 1] * mu0.grid.h
        zs = chunk_normals(seed, lo, hi, n_steps)
        rec_pos = 0
        for k in range(n_steps + 1):
            if rec_pos < len(rec_steps) and k == rec_steps[rec_pos]:
                X_rec[lo:hi, rec_pos] = x
                Q_rec[lo:hi, rec_pos] = a.at(k * dt, x)
                rec_pos += 1
            if k < n_steps:
                rate = a.at(k * dt, x)
                x = x + np.sqrt(rate) * sqrt_dt * zs[:, k]
    return PathEnsemble(seed=seed, dt=dt, t=t_rec, X=X_rec, qv_rate=Q_rec)


def marginal_distance(ens: PathEnsemble, s: float, rho: DiscreteMeasure) -> float:
    """W1 distance between the binned empirical marginal at ``s`` and ``rho``."""
    pos = ens.positions_at(s)
    counts = np.bincount(rho.grid.cell_of(pos), minlength=rho.grid.n_cells)
    emp = DiscreteMeasure(rho.grid, counts / len(pos))
    return wasserstein1(emp, rho)
