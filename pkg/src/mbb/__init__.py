"""Martingale Benamou-Brenier toolkit.

Numerical machinery for the continuous-time martingale optimal transport
problem in one space dimension: gridded measures and convex-order tests,
power costs and their conjugates, the discrete-time martingale transport LP,
a conservative Fokker-Planck solver with a matching SDE simulator, the
explicit Dacorogna-Moser interpolation, a primal-dual solver for the dynamic
(flux-form) problem, porous-medium / Hamilton-Jacobi dual machinery, and
Monte-Carlo verification of the length-relaxation limit.
"""

from .grids import Grid1D, DiscreteMeasure, convex_order, convolve, mollify, potential
from .costs import CostSpec, DualCostSpec, legendre, grad_legendre, smeared_cost, m_p
from .motlp import MartingaleCoupling, solve_mot_lp, rescaled_cumulative_cost
from .fpe import DiffusionField, MeasureCurve, PathEnsemble, solve_fpe, simulate_sde
from .interpolation import DacMoserPlan, dacorogna_moser, dacmoser_cost, strassen_coupling
from .primal import PrimalProblem, PrimalSolution, solve_primal
from .dual import (
    PMESolution,
    Potential,
    GiantProfile,
    solve_backward_pme,
    friendly_giant_profile,
    pressure_from_u,
    potential_from_u,
    weak_duality_gap,
    optimal_a_from_phi,
)
from .relaxation import (
    Partition,
    discrete_cumulative_cost,
    relaxation_rhs,
    relaxation_convergence,
    skorokhod_time_change,
)

__version__ = "0.1.0"

__all__ = [
    "Grid1D",
    "DiscreteMeasure",
    "convex_order",
    "convolve",
    "mollify",
    "potential",
    "CostSpec",
    "DualCostSpec",
    "legendre",
    "grad_legendre",
    "smeared_cost",
    "m_p",
    "MartingaleCoupling",
    "solve_mot_lp",
    "rescaled_cumulative_cost",
    "DiffusionField",
    "MeasureCurve",
    "PathEnsemble",
    "solve_fpe",
    "simulate_sde",
    "DacMoserPlan",
    "dacorogna_moser",
    "dacmoser_cost",
    "strassen_coupling",
    "PrimalProblem",
    "PrimalSolution",
    "solve_primal",
    "PMESolution",
    "Potential",
    "GiantProfile",
    "solve_backward_pme",
    "friendly_giant_profile",
    "pressure_from_u",
    "potential_from_u",
    "weak_duality_gap",
    "optimal_a_from_phi",
    "Partition",
    "discrete_cumulative_cost",
    "relaxation_rhs",
    "relaxation_convergence",
    "skorokhod_time_change",
    "__version__",
]
