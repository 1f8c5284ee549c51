"""Discrete-time martingale optimal transport as a linear program.

Minimizes ``sum_ij c(x_i, y_j) pi_ij`` over couplings with prescribed
marginals and the conditional-mean (martingale) constraint
``sum_j pi_ij (y_j - x_i) = 0`` for every charged source cell.  The LP is
solved behind a single :func:`solve_lp` contract; instances stay small
(<= 200 x 200 grids), so a dense cost matrix with sparse constraints is fine.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .grids import DiscreteMeasure, convex_order_violation

__all__ = [
    "InfeasibleError",
    "LPSolverError",
    "MartingaleCoupling",
    "solve_lp",
    "solve_mot_lp",
    "rescaled_cumulative_cost",
]

ACTIVE_MASS = 1e-14


class InfeasibleError(RuntimeError):
    """No martingale coupling exists (convex order fails).

    Carries the worst potential-function crossing as a certificate:
    ``x_star`` where ``pi_mu - pi_nu`` is largest, the crossing ``gap``
    there, and the mean difference.
    """

    def __init__(self, msg, x_star=None, gap=None, mean_gap=None):
        super().__init__(msg)
        self.x_star = x_star
        self.gap = gap
        self.mean_gap = mean_gap


class LPSolverError(RuntimeError):
    """Underlying LP solver did not converge within its iteration cap."""


@dataclass
class LPResult:
    x: np.ndarray
    value: float
    dual_eq: np.ndarray
    status: int
    message: str


def solve_lp(c, A_eq, b_eq, maxiter: int = 200_000) -> LPResult:
    """Solve ``min c@x  s.t.  A_eq x = b_eq, x >= 0`` deterministically.

    Thin contract over a dual-simplex engine; raises
    :class:`InfeasibleError` / :class:`LPSolverError` on the corresponding
    terminations.
    """
    res = linprog(
        c,
        A_eq=A_eq,
        b_eq=b_eq,
        bounds=(0, None),
        method="highs",
        options={"maxiter": maxiter, "presolve": True},
    )
    if res.status == 2:
        raise InfeasibleError("equality-constrained LP is infeasible")
    if res.status != 0:
        raise LPSolverError(f"LP solver failed (status {res.status}): {res.message}")
    return LPResult(res.x, float(res.fun), np.asarray(res.eqlin.marginals), res.status, res.message)


@dataclass
class MartingaleCoupling:
    """Optimal coupling ``pi`` with objective value and residual norms."""

    source: DiscreteMeasure
    target: DiscreteMeasure
    plan: np.ndarray = field(repr=False)
    value: float | None
    dual_value: float | None = None

    @property
    def residuals(self) -> dict:
        row = np.abs(self.plan.sum(axis=1) - self.source.weights).max()
        col = np.abs(self.plan.sum(axis=0) - self.target.weights).max()
        mart = self.martingale_defect().max() if self.plan.size else 0.0
        return {"row_sum": float(row), "col_sum": float(col), "martingale": float(mart)}

    def martingale_defect(self) -> np.ndarray:
        """``|sum_j pi_ij (y_j - x_i)|`` per charged source cell."""
        x = self.source.grid.centers
        y = self.target.grid.centers
        mu = self.source.weights
        active = mu > ACTIVE_MASS
        drift = self.plan @ y - self.plan.sum(axis=1) * x
        return np.abs(drift[active])

    def conditional_mean_defect(self, min_mass: float = 0.0) -> np.ndarray:
        """``|E[Y | X = x_i] - x_i|`` over cells with row mass above ``min_mass``."""
        x = self.source.grid.centers
        y = self.target.grid.centers
        rows = self.plan.sum(axis=1)
        keep = rows > max(min_mass, ACTIVE_MASS)
        cond = (self.plan[keep] @ y) / rows[keep]
        return np.abs(cond - x[keep])

    def to_dict(self) -> dict:
        return {
            "source": self.source.to_dict(),
            "target": self.target.to_dict(),
            "plan": self.plan.tolist(),
            "value": self.value,
            "dual_value": self.dual_value,
            "residuals": self.residuals,
        }


def solve_mot_lp(mu: DiscreteMeasure, nu: DiscreteMeasure, cost) -> MartingaleCoupling:
    """Solve the discrete martingale transport LP between gridded marginals.

    Parameters
    ----------
    mu, nu:
        Source and target measures (any pair of uniform grids).
    cost:
        Vectorizable callable ``cost(x, y)`` evaluated on center pairs.

    Raises
    ------
    InfeasibleError
        When the marginals are not in convex order; the error carries the
        potential-crossing certificate.
    """
    x_full = mu.grid.centers
    y_full = nu.grid.centers
    ia = np.nonzero(mu.weights > ACTIVE_MASS)[0]
    ja = np.nonzero(nu.weights > ACTIVE_MASS)[0]
    x, y = x_full[ia], y_full[ja]
    nr, nc = len(ia), len(ja)

    C = np.asarray(cost(x[:, None], y[None, :]), dtype=float)

    def pij(i, j):
        return i * nc + j

    rows, cols, vals = [], [], []
    # row sums = mu_i
    for i in range(nr):
        rows.extend([i] * nc)
        cols.extend(pij(i, j) for j in range(nc))
        vals.extend([1.0] * nc)
    # column sums = nu_j
    for j in range(nc):
        rows.extend([nr + j] * nr)
        cols.extend(pij(i, j) for i in range(nr))
        vals.extend([1.0] * nr)
    # martingale rows, one per charged source cell (normalized for conditioning)
    for i in range(nr):
        rows.extend([nr + nc + i] * nc)
        cols.extend(pij(i, j) for j in range(nc))
        scale = max(np.abs(y - x[i]).max(), 1.0)
        vals.extend(((y - x[i]) / scale).tolist())
    A = sp.csr_matrix((vals, (rows, cols)), shape=(2 * nr + nc, nr * nc))
    b = np.concatenate([mu.weights[ia], nu.weights[ja], np.zeros(nr)])

    try:
        res = solve_lp(C.ravel(), A, b)
    except InfeasibleError:
        x_star, gap, mean_gap = convex_order_violation(mu, nu)
        raise InfeasibleError(
            f"marginals not in convex order: potential crossing {gap:.3e} at "
            f"x = {x_star:.6g}, mean gap {mean_gap:.3e}",
            x_star=x_star,
            gap=gap,
            mean_gap=mean_gap,
        ) from None

    plan = np.zeros((mu.grid.n_cells, nu.grid.n_cells))
    plan[np.ix_(ia, ja)] = res.x.reshape(nr, nc)
    return MartingaleCoupling(mu, nu, plan, res.value, dual_value=float(b @ res.dual_eq))


def rescaled_cumulative_cost(marginals, times, c_point) -> float:
    """Cumulative rescaled transport cost along a given marginal curve.

    For a partition ``0 = t_0 < ... < t_n = 1`` and marginals ``rho_{t_i}``
    this evaluates ``sum_i MOT(rho_{t_{i-1}}, rho_{t_i}) * (t_i - t_{i-1})``
    with the per-step cost ``c_point((y - x) / sqrt(t_i - t_{i-1}))``.  No
    optimization over the intermediate marginals is performed.
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or len(times) != len(marginals):
        raise ValueError("need one marginal per partition time")
    if np.any(np.diff(times) <= 0):
        raise ValueError("partition times must be strictly increasing")
    total = 0.0
    for i in range(1, len(times)):
        dt = times[i] - times[i - 1]
        scale = 1.0 / np.sqrt(dt)
        coupling = solve_mot_lp(
            marginals[i - 1], marginals[i], lambda u, v: c_point((v - u) * scale)
        )
        total += coupling.value * dt
    return total
