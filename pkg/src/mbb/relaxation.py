"""Monte-Carlo verification of the length-relaxation limit and embeddings.

The discrete cumulative cost of a martingale ensemble over a partition,

    sum_i E[ c( (X_{t_i} - X_{t_{i-1}}) / sqrt(t_i - t_{i-1}) ) ] (t_i - t_{i-1}),

converges as the mesh vanishes to the Gaussian-smeared "length"

    int_0^1 E[ c( sqrt(qv_rate_t) Z ) ] dt

for martingales with an a.s. continuous quadratic-variation rate.  This
module estimates both sides with explicit standard errors, tabulates the
convergence trend, and builds finite-cost martingales from arbitrary
convex-ordered marginals by Skorokhod embedding plus the deterministic time
change ``beta_t = (t / (1-t))^{1/r}``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .costs import smeared_cost
from .fpe import PathEnsemble
from .grids import DiscreteMeasure, wasserstein1
from .interpolation import _require_convex_order
from .rng import chunk_uniforms

__all__ = [
    "Partition",
    "CostEstimate",
    "ConvergenceRow",
    "EmbeddingRun",
    "discrete_cumulative_cost",
    "relaxation_rhs",
    "relaxation_convergence",
    "convergence_csv",
    "skorokhod_time_change",
    "time_change_energy",
]


@dataclass(frozen=True)
class Partition:
    """Strictly increasing times ``0 = t_0 < ... < t_n = 1``."""

    times: np.ndarray = field(repr=False)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if len(t) < 2 or abs(t[0]) > 1e-12 or abs(t[-1] - 1.0) > 1e-12:
            raise ValueError("partition must run from 0 to 1")
        if np.any(np.diff(t) <= 0):
            raise ValueError("partition times must be strictly increasing")
        object.__setattr__(self, "times", t)

    @classmethod
    def uniform(cls, n: int) -> "Partition":
        return cls(np.linspace(0.0, 1.0, n + 1))

    @property
    def mesh(self) -> float:
        return float(np.diff(self.times).max())


@dataclass(frozen=True)
class CostEstimate:
    value: float
    se: float
    terms: np.ndarray | None = field(repr=False, default=None)


def _snap_partition(ens: PathEnsemble, part: Partition) -> np.ndarray:
    idx = np.array([int(np.argmin(np.abs(ens.t - s))) for s in part.times])
    if np.any(np.diff(idx) < 1):
        raise ValueError("partition is finer than the ensemble's record grid")
    snapped = np.abs(ens.t[idx] - part.times).max()
    if snapped > 1e-9:
        warnings.warn(f"partition snapped to record grid (max shift {snapped:.2e})")
    return idx


def discrete_cumulative_cost(
    ens: PathEnsemble,
    part: Partition,
    c_point,
    mode: str = "plain",
    p: float | None = None,
) -> CostEstimate:
    """Monte-Carlo estimate of the partition sum with per-term standard errors.

    ``mode="plain"`` weighs each term ``E[c(increment / sqrt(dt))]`` by its
    time step; ``mode="power_1_over_p"`` applies ``|.|^{1/p}`` to each
    expectation first and propagates standard errors by the delta method.
    """
    if mode not in ("plain", "power_1_over_p"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "power_1_over_p" and (p is None or p < 1):
        raise ValueError("power mode needs p >= 1")
    idx = _snap_partition(ens, part)
    t = ens.t[idx]
    X = np.asarray(ens.X[:, idx], dtype=float)
    n = X.shape[0]
    total, var_total = 0.0, 0.0
    terms = []
    for i in range(1, len(idx)):
        dt = t[i] - t[i - 1]
        vals = c_point((X[:, i] - X[:, i - 1]) / math.sqrt(dt))
        mean = float(vals.mean())
        se = float(vals.std(ddof=1) / math.sqrt(n))
        if mode == "plain":
            total += mean * dt
            var_total += (se * dt) ** 2
        else:
            root = abs(mean) ** (1.0 / p)
            dse = root / (p * abs(mean)) * se if mean != 0.0 else se ** (1.0 / p)
            total += root * dt
            var_total += (dse * dt) ** 2
        terms.append(mean)
    return CostEstimate(value=float(total), se=float(math.sqrt(var_total)), terms=np.asarray(terms))


def relaxation_rhs(
    ens: PathEnsemble,
    c_point,
    mode: str = "plain",
    p: float | None = None,
    quad_order: int = 40,
) -> CostEstimate:
    """Time quadrature of ``E[c(sqrt(qv_rate) Z)]`` along the recorded paths.

    The Gaussian variable is integrated exactly by Gauss-Hermite; paths are
    sampled.  In plain mode the per-path time integral is formed first, so
    the standard error is exact; the powered mode propagates pointwise
    standard errors through the ``1/p`` power and adds them conservatively.
    """
    if mode not in ("plain", "power_1_over_p"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "power_1_over_p" and (p is None or p < 1):
        raise ValueError("power mode needs p >= 1")
    qv = np.asarray(ens.qv_rate, dtype=float)
    n = qv.shape[0]
    smear = smeared_cost(c_point, qv, quad_order=quad_order)
    if mode == "plain":
        per_path = np.trapezoid(smear, ens.t, axis=1)
        return CostEstimate(
            value=float(per_path.mean()), se=float(per_path.std(ddof=1) / math.sqrt(n))
        )
    means = smear.mean(axis=0)
    ses = smear.std(axis=0, ddof=1) / math.sqrt(n)
    roots = np.abs(means) ** (1.0 / p)
    with np.errstate(divide="ignore", invalid="ignore"):
        dse = np.where(means != 0.0, roots / (p * np.abs(means)) * ses, ses ** (1.0 / p))
    return CostEstimate(value=float(np.trapezoid(roots, ens.t)), se=float(np.trapezoid(dse, ens.t)))


@dataclass(frozen=True)
class ConvergenceRow:
    mesh: float
    lhs: float
    rhs: float
    diff: float
    se: float


def relaxation_convergence(
    ens: PathEnsemble,
    meshes,
    c_point,
    mode: str = "plain",
    p: float | None = None,
) -> list[ConvergenceRow]:
    """Table of ``|LHS(partition) - RHS|`` against the partition mesh."""
    rhs = relaxation_rhs(ens, c_point, mode=mode, p=p)
    rows = []
    for mesh in meshes:
        n = max(int(round(1.0 / mesh)), 1)
        lhs = discrete_cumulative_cost(ens, Partition.uniform(n), c_point, mode=mode, p=p)
        rows.append(
            ConvergenceRow(
                mesh=1.0 / n,
                lhs=float(lhs.value),
                rhs=float(rhs.value),
                diff=float(abs(lhs.value - rhs.value)),
                se=float(math.hypot(lhs.se, rhs.se)),
            )
        )
    return rows


def convergence_csv(rows) -> str:
    out = ["mesh,lhs,rhs,diff,se"]
    for r in rows:
        out.append(f"{r.mesh!r},{r.lhs!r},{r.rhs!r},{r.diff!r},{r.se!r}")
    return "\n".join(out) + "\n"


# -- Skorokhod embedding with deterministic time change ----------------------


@dataclass(frozen=True)
class EmbeddingRun:
    """Embedding output: stopping times, stopped positions and cost record."""

    tau: np.ndarray = field(repr=False)
    stopped: np.ndarray = field(repr=False)
    r: float
    p: float
    energy: float  # empirical E[int_0^1 qv_rate^p dt]
    energy_se: float
    mean_tau: float
    w1_target: float
    n_unstopped: int
    method: str

    @property
    def n_paths(self) -> int:
        return len(self.tau)


def _beta_smooth_factor(s, r: float, p: float):
    return r ** (1.0 - p) * (1.0 + s**r) ** (2.0 * (p - 1.0))


def time_change_energy(tau: np.ndarray, r: float, p: float, order: int = 64) -> np.ndarray:
    """``int_0^1 qv_rate^p dt = int_0^tau ((beta^{-1})'(s))^(1-p) ds`` per path.

    The integrand is ``r^{1-p} s^gamma (1+s^r)^{2(p-1)}`` with
    ``gamma = (1-r)(p-1)``; the substitution ``s = tau * v^{1/(1+gamma)}``
    absorbs the endpoint power so fixed Gauss-Legendre nodes suffice.
    """
    gamma = (1.0 - r) * (p - 1.0)
    if gamma <= -1.0:
        raise ValueError("time-change energy diverges: need r < p/(p-1)")
    v, w = np.polynomial.legendre.leggauss(order)
    v = 0.5 * (v + 1.0)
    w = 0.5 * w
    tau = np.asarray(tau, dtype=float)
    s = tau[:, None] * v[None, :] ** (1.0 / (1.0 + gamma))
    return tau ** (1.0 + gamma) / (1.0 + gamma) * (_beta_smooth_factor(s, r, p) @ w)


def _barycenter_function(nu: DiscreteMeasure):
    """Right-continuous ``psi(x) = E[Y | Y >= x]`` from the gridded atoms."""
    y = nu.grid.centers
    w = nu.weights
    tail_mass = np.cumsum(w[::-1])[::-1]
    tail_mean = np.cumsum((w * y)[::-1])[::-1]
    psi = np.where(tail_mass > 1e-15, tail_mean / np.maximum(tail_mass, 1e-300), y)

    def evaluate(x):
        j = np.clip(np.searchsorted(y, x, side="left"), 0, len(y) - 1)
        return np.where(x > y[-1], x, psi[j])

    return evaluate


def _chacon_walsh_stages(mu: DiscreteMeasure, nu: DiscreteMeasure, atol: float = 1e-12):
    """Finite sequence of exit intervals turning mu's potential into nu's.

    The target potential is the maximum of its linear pieces; each interior
    piece cuts the current potential along one interval, and stopping at the
    exit of that interval replaces the potential there by the chord.  Atom
    lists stay finite, so one stage per interior piece terminates exactly.
    """
    atoms = {float(c): float(w) for c, w in zip(mu.grid.centers, mu.weights) if w > atol}
    keep = nu.weights > atol
    y = nu.grid.centers[keep]
    wy = nu.weights[keep]
    cdf = np.cumsum(wy)
    stages = []
    for i in range(len(y) - 1):
        # the line carrying the target potential's segment on (y_i, y_{i+1})
        slope = 2.0 * cdf[i] - 1.0
        mid = 0.5 * (y[i] + y[i + 1])
        val_mid = float(np.abs(mid - y) @ wy)

        def line(x, s=slope, m=mid, v=val_mid):
            return v + s * (np.asarray(x, dtype=float) - m)

        pts = np.asarray(sorted(atoms))
        ws = np.asarray([atoms[c] for c in sorted(atoms)])
        gap = (np.abs(pts[:, None] - pts[None, :]) @ ws) - line(pts)
        below = gap < -atol
        if not np.any(below):
            continue
        j_lo = int(np.argmax(below))
        j_hi = len(below) - 1 - int(np.argmax(below[::-1]))
        a = _cross(pts, ws, line, pts[j_lo], -1)
        b = _cross(pts, ws, line, pts[j_hi], +1)
        new_atoms: dict[float, float] = {}
        for z, wz in atoms.items():
            if a + atol < z < b - atol:
                frac = (z - a) / (b - a)  # exact exit-side probability
                new_atoms[b] = new_atoms.get(b, 0.0) + wz * frac
                new_atoms[a] = new_atoms.get(a, 0.0) + wz * (1.0 - frac)
            else:
                new_atoms[z] = new_atoms.get(z, 0.0) + wz
        atoms = new_atoms
        stages.append((float(a), float(b)))
    return stages


def _cross(pts, ws, line, x0, direction):
    """Walk outward from ``x0`` to the potential/line crossing, then bisect."""

    def gap(x):
        return float(np.abs(x - pts) @ ws - line(x))

    lo = x0
    step = max(abs(x0), 1.0)
    probe = x0
    for _ in range(200):
        probe = probe + direction * step
        if gap(probe) >= 0:
            break
        step *= 2.0
    else:
        raise RuntimeError("potential/line crossing not bracketed")
    hi = probe
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if gap(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _stage_rng(seed, path, stage, blk, salt: int = 0):
    ss = np.random.SeedSequence(
        entropy=int(seed), spawn_key=(int(path), 7001 + int(stage), int(blk), int(salt))
    )
    return np.random.Generator(np.random.Philox(ss))


def _block_draws(seed, ids, stage, blk, block, salt, kind="normal"):
    out = np.empty((len(ids), block))
    for row, i in enumerate(ids):
        gen = _stage_rng(seed, i, stage, blk, salt=salt)
        out[row] = gen.standard_normal(block) if kind == "normal" else gen.random(block)
    return out


def _simulate_exit_stage(
    x, tau, a, b, seed, stage, dt, chunk: int = 16384, block: int = 256, max_blocks: int = 2048
):
    """Run paths inside ``(a, b)`` to the exit, with Brownian-bridge crossings.

    Crossings that happen inside a step are detected by the bridge
    probability ``exp(-2 (b - x_k)(b - x_{k+1}) / dt)``, which removes the
    O(sqrt(dt)) late-detection bias; exit positions snap to the boundary.
    Draws are keyed by (seed, path, stage, block), so results are
    independent of chunking.
    """
    inside_all = np.nonzero((x > a) & (x < b))[0]
    sqdt = math.sqrt(dt)
    for lo in range(0, len(inside_all), chunk):
        ids = inside_all[lo : lo + chunk]
        pos = x[ids].copy()
        t_loc = tau[ids].copy()
        done = np.zeros(len(ids), dtype=bool)
        for blk in range(max_blocks):
            act = np.nonzero(~done)[0]
            if len(act) == 0:
                break
            zs = _block_draws(seed, ids[act], stage, blk, block, salt=0)
            us = _block_draws(seed, ids[act], stage, blk, block, salt=1, kind="uniform")
            p_act = pos[act]
            t_act = t_loc[act]
            fin = np.zeros(len(act), dtype=bool)
            for k in range(block):
                live = ~fin
                if not live.any():
                    break
                old = p_act[live]
                new = old + sqdt * zs[live, k]
                t_act[live] += dt
                with np.errstate(over="ignore"):
                    p_hi = np.exp(-2.0 * np.maximum(b - old, 0.0) * np.maximum(b - new, 0.0) / dt)
                    p_lo = np.exp(-2.0 * np.maximum(old - a, 0.0) * np.maximum(new - a, 0.0) / dt)
                u = us[live, k]
                hit_hi = (new >= b) | (u < p_hi)
                hit_lo = ~hit_hi & ((new <= a) | (u < p_hi + p_lo))
                new = np.where(hit_hi, b, np.where(hit_lo, a, new))
                p_act[live] = new
                fin[live] |= hit_hi | hit_lo
            pos[act] = p_act
            t_loc[act] = t_act
            done[act] |= fin
        x[ids] = pos
        tau[ids] = t_loc


def _azema_yor(nu, start, n_paths, seed, horizon, dt, chunk: int = 16384, block: int = 256):
    """Stop when the running maximum reaches the target barycenter function."""
    psi = _barycenter_function(nu)
    x = start.copy()
    tau = np.zeros(n_paths)
    unstopped = 0
    sqdt = math.sqrt(dt)
    max_blocks = max(int(horizon / (block * dt)) + 1, 1)
    for lo in range(0, n_paths, chunk):
        ids = np.arange(lo, min(lo + chunk, n_paths))
        pos = x[ids].copy()
        mx = pos.copy()
        t_loc = tau[ids].copy()
        done = np.zeros(len(ids), dtype=bool)
        for blk in range(max_blocks):
            act = np.nonzero(~done)[0]
            if len(act) == 0:
                break
            zs = _block_draws(seed, ids[act], 0, blk, block, salt=2)
            p_act, m_act, t_act = pos[act], mx[act], t_loc[act]
            fin = np.zeros(len(act), dtype=bool)
            for k in range(block):
                live = ~fin
                if not live.any():
                    break
                new = p_act[live] + sqdt * zs[live, k]
                t_act[live] += dt
                m_new = np.maximum(m_act[live], new)
                stop = m_new >= psi(new) - 1e-12
                p_act[live] = new
                m_act[live] = m_new
                fin[live] |= stop
            pos[act], mx[act], t_loc[act] = p_act, m_act, t_act
            done[act] |= fin
        unstopped += int((~done).sum())
        x[ids] = pos
        tau[ids] = t_loc
    return x, tau, unstopped


def _sample_start(mu: DiscreteMeasure, n_paths: int, seed: int) -> np.ndarray:
    u = chunk_uniforms(seed, 0, n_paths, 1, salt=0xA11CE)[:, 0]
    cdf = np.concatenate([[0.0], np.cumsum(mu.weights)])
    cdf[-1] = 1.0
    cells = np.clip(np.searchsorted(cdf, u, side="right") - 1, 0, mu.grid.n_cells - 1)
    return mu.grid.centers[cells]


def skorokhod_time_change(
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    p: float,
    q_mom: float,
    r: float,
    n_paths: int,
    seed: int,
    dt_scale: float = 1.0 / 2048,
    max_atoms_exit: int = 8,
    horizon: float = 200.0,
) -> EmbeddingRun:
    """Embed ``nu`` into Brownian motion from ``mu`` and time-change to ``[0, 1]``.

    When ``nu`` carries at most ``max_atoms_exit`` atoms the embedding is a
    finite sequence of interval exits (chords of the potential functions,
    exact for atomic targets); otherwise the running-maximum barycenter rule
    is used (exact from a point start; a general ``mu`` randomizes the start
    over its cells, which is the standard approximation).  The martingale
    ``X_t = B_{tau ^ beta_t}`` with ``beta_t = (t/(1-t))^{1/r}`` has
    ``qv_rate_t = indicator(beta_t <= tau) * beta'_t``, and its p-energy is
    evaluated per path in closed form from ``tau``.

    ``r`` must satisfy ``0 < r <= (q_mom - 2p)/(2p - 2)`` with ``q_mom > 2p``
    (the moment condition) and ``r < p/(p-1)`` (else the time-change energy
    integral diverges at 0).
    """
    if p <= 1:
        raise ValueError("p must exceed 1")
    if q_mom <= 2 * p:
        raise ValueError("need q_mom > 2p")
    r_max = (q_mom - 2.0 * p) / (2.0 * p - 2.0)
    if not 0 < r <= r_max:
        raise ValueError(f"r must lie in (0, {r_max:.4g}]")
    if r >= p / (p - 1.0):
        raise ValueError("need r < p/(p-1) for a finite time-change energy")
    _require_convex_order(mu, nu)

    start = _sample_start(mu, n_paths, seed)
    x = start.copy()
    tau = np.zeros(n_paths)
    n_unstopped = 0
    if int((nu.weights > 1e-12).sum()) <= max_atoms_exit:
        stages = _chacon_walsh_stages(mu, nu)
        for s_idx, (a, b) in enumerate(stages):
            _simulate_exit_stage(x, tau, a, b, seed, s_idx, dt_scale * (b - a) ** 2)
        method = "interval-exit"
    else:
        x, tau, n_unstopped = _azema_yor(nu, start, n_paths, seed, horizon, dt=1.0 / 1024)
        method = "azema-yor"

    stopped_law = DiscreteMeasure(
        nu.grid, np.bincount(nu.grid.cell_of(x), minlength=nu.grid.n_cells) / n_paths
    )
    energies = time_change_energy(tau, r, p)
    return EmbeddingRun(
        tau=tau,
        stopped=x,
        r=r,
        p=p,
        energy=float(energies.mean()),
        energy_se=float(energies.std(ddof=1) / math.sqrt(n_paths)),
        mean_tau=float(tau.mean()),
        w1_target=wasserstein1(stopped_law, nu),
        n_unstopped=int(n_unstopped),
        method=method,
    )
