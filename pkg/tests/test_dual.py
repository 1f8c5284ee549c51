import math

import numpy as np
import pytest
from scipy.special import gamma as gamma_fn

from mbb.costs import CostSpec, DualCostSpec
from mbb.dual import (
    GiantProfile,
    NotSuperSolutionError,
    Potential,
    friendly_giant_profile,
    giant_terminal_check,
    graded_times,
    hjb_residual,
    pme_scheme_residual,
    potential_from_u,
    pressure_from_u,
    pressure_residual,
    solve_backward_pme,
    weak_duality_gap,
    optimal_a_from_phi,
)
from mbb.fpe import DiffusionField, solve_fpe
from mbb.grids import DiscreteMeasure, Grid1D, mollify


@pytest.fixture(scope="module")
def giant2():
    return friendly_giant_profile(2.0, n_x=2001)


def test_profile_center_value_oracle(giant2):
    # for q=2 the first integral gives w_max = 16 / (9 I^4) with
    # I = (2/3) B(2/3, 1/2) (Beta-function value of the period integral)
    I = (2.0 / 3.0) * gamma_fn(2.0 / 3.0) * gamma_fn(0.5) / gamma_fn(2.0 / 3.0 + 0.5)
    w_max = 16.0 / (9.0 * I**4)
    center = giant2.g[len(giant2.g) // 2] ** 2
    assert center == pytest.approx(w_max, abs=1e-6)


def test_profile_residual_symmetry_boundary(giant2):
    assert giant2.residual <= 1e-8
    assert np.abs(giant2.g - giant2.g[::-1]).max() == 0.0
    assert giant2.g[0] == 0.0 and giant2.g[-1] == 0.0
    assert giant2.g.min() >= 0.0
    assert np.all(giant2.g[1:-1] > 0.0)


def test_profile_other_exponents():
    for q in (1.5, 3.0):
        gp = friendly_giant_profile(q, n_x=1201)
        assert gp.residual <= 1e-8
        assert gp.g[0] == 0.0 and gp.g[-1] == 0.0
    with pytest.raises(ValueError):
        friendly_giant_profile(1.0)
    with pytest.raises(ValueError):
        friendly_giant_profile(2.0, n_x=100)  # must be odd


def test_pme_zero_terminal():
    sol = solve_backward_pme(np.zeros(101), q=2.0, r=1.0, n_x=100)
    assert np.abs(sol.u).max() == 0.0


def test_pme_separable_scheme_residual():
    q = 2.0
    gp = friendly_giant_profile(q, n_x=801)
    t = graded_times(0.0, 0.9, 600, focus=3.0)
    rel = pme_scheme_residual(gp.u_field(t), t, gp.x, q)
    assert rel <= 1e-2


def test_pme_matches_separable_solution():
    q = 2.0
    gp = friendly_giant_profile(q, n_x=801)
    t = graded_times(0.0, 0.9, 600, focus=3.0)
    sol = solve_backward_pme(10.0 * gp.g, q=q, r=1.0, n_x=800, t_nodes=t)
    rel = np.abs(sol.u[0] - gp.g).max() / gp.g.max()
    assert rel <= 1e-2


def test_pme_maximum_and_comparison_principles():
    q = 2.0
    x = np.linspace(-1, 1, 201)
    u1 = np.maximum(1 - (x / 0.5) ** 2, 0.0) ** 2
    sol = solve_backward_pme(u1, q=q, r=1.0, n_x=200)
    assert sol.u.max() <= u1.max() + 1e-9
    assert sol.u.min() >= -1e-12
    sol_small = solve_backward_pme(0.6 * u1, q=q, r=1.0, n_x=200)
    assert np.all(sol_small.u <= sol.u + 1e-9)


def test_pme_dirichlet_mass_absorbs():
    # integral of the forward solution is nonincreasing under zero boundary
    q = 2.0
    x = np.linspace(-1, 1, 201)
    u1 = np.exp(-((x / 0.4) ** 2)) * (1 - x * x)
    sol = solve_backward_pme(u1, q=q, r=1.0, n_x=200)
    masses = sol.u.sum(axis=1)  # ascending t = backward s
    assert np.all(np.diff(masses) >= -1e-10)


def test_pressure_field_and_residual(giant2):
    q = 2.0
    t = np.linspace(0.0, 0.9, 721)
    coarse = friendly_giant_profile(q, n_x=801)
    a = DiffusionField(t, coarse.x, 2 * q * coarse.g[None, :] ** (q - 1) / (1 - t[:, None]))
    assert pressure_residual(a, p=2.0) <= 1e-2
    # dropping the conjugate factor 2 breaks the pressure equation
    a_half = DiffusionField(t, coarse.x, q * coarse.g[None, :] ** (q - 1) / (1 - t[:, None]))
    assert pressure_residual(a_half, p=2.0) >= 0.2


def test_pressure_from_u_zero_and_sign():
    sol = solve_backward_pme(np.zeros(101), q=2.0, r=1.0, n_x=100)
    a = pressure_from_u(sol)
    assert np.abs(a.values).max() == 0.0
    x = np.linspace(-1, 1, 101)
    sol2 = solve_backward_pme(np.maximum(1 - (x / 0.5) ** 2, 0.0), q=2.0, r=1.0, n_x=100)
    assert pressure_from_u(sol2).values.min() >= 0.0


def test_potential_reconstruction_flat_slice():
    # u = 1 on the interior: phi solves phi'' = 2 with zero ends -> x^2 - r^2
    r = 1.5
    x = np.linspace(-r, r, 301)
    u = np.ones_like(x)
    u[0] = u[-1] = 0.0
    from mbb.dual import PMESolution

    pme = PMESolution(t=np.array([0.0, 1.0]), x=x, u=np.stack([u, u]), q=2.0)
    pot = potential_from_u(pme)
    interior = slice(1, -1)
    assert np.abs(pot.phi[0][interior] - (x[interior] ** 2 - r * r)).max() <= 1e-9
    # half_laplacian recovers u exactly on the shared stencil
    assert np.abs(pot.half_laplacian()[0][interior] - 1.0).max() <= 1e-9


def test_potential_hjb_residual():
    q = 2.0
    x = np.linspace(-1, 1, 257)
    u1 = np.maximum(1 - (x / 0.6) ** 2, 0.0) ** 2
    t = graded_times(0.0, 1.0, 256, focus=5.0)
    sol = solve_backward_pme(u1, q=q, r=1.0, n_x=256, t_nodes=t)
    pot = potential_from_u(sol)
    res = hjb_residual(pot, DualCostSpec(q=q, kappa=2.0))
    scale = max(np.abs(pot.phi).max(), 1.0)
    assert res <= 10 * (np.diff(t).max() + (x[1] - x[0]) ** 2) * scale
    assert np.abs(pot.phi[:, 0]).max() == 0.0 and np.abs(pot.phi[:, -1]).max() == 0.0


def test_optimal_a_matches_pressure():
    q = 2.0
    x = np.linspace(-1, 1, 201)
    u1 = np.maximum(1 - (x / 0.6) ** 2, 0.0) ** 2
    sol = solve_backward_pme(u1, q=q, r=1.0, n_x=200)
    pot = potential_from_u(sol)
    cost = CostSpec(p=q / (q - 1.0), kind="pme-dual")
    a_phi = optimal_a_from_phi(pot, cost)
    a_u = pressure_from_u(sol)
    interior = slice(1, -1)
    assert np.abs(a_phi.values[:, interior] - a_u.values[:, interior]).max() <= 1e-6


def test_weak_duality_affine_potential(grid400):
    mu = DiscreteMeasure.gaussian(grid400, 0.0, 0.3)
    nu = DiscreteMeasure.gaussian(grid400, 0.0, 0.8)
    from mbb.fpe import DiffusionField as DF

    a = DF.constant(0.5, t=np.linspace(0, 1, 11), x=np.array([-8.0, 8.0]))
    curve = solve_fpe(mu, a, t_nodes=np.linspace(0, 1, 101))
    out = weak_duality_gap(lambda t, x: 2.0 * x + 1.0, curve, a, CostSpec(p=2.0))
    assert out["dual_value"] == pytest.approx(0.0, abs=1e-6)
    assert out["gap"] == pytest.approx(out["primal_value"], abs=1e-6)
    assert out["gap"] >= 0.0


def test_weak_duality_rejects_subsolution(grid400):
    mu = DiscreteMeasure.gaussian(grid400, 0.0, 0.3)
    a = DiffusionField.constant(1.0, t=np.linspace(0, 1, 11), x=np.array([-8.0, 8.0]))
    curve = solve_fpe(mu, a, t_nodes=np.linspace(0, 1, 101))
    with pytest.raises(NotSuperSolutionError) as exc:
        weak_duality_gap(lambda t, x: t + 2.0 * x**2, curve, a, CostSpec(p=2.0),
                         tol_super=0.5)
    assert exc.value.violation > 1.0


def test_giant_terminal_check():
    grid = Grid1D(-1.25, 1.25, 501)
    mu = mollify(DiscreteMeasure.point_mass(grid, 0.0), 0.01)
    rep = giant_terminal_check(2.0, mu, t_stop=0.99, n_t=1200,
                               profile=friendly_giant_profile(2.0, n_x=1201))
    assert rep["mass_near_endpoints"] >= 0.95
    assert abs(rep["terminal_mean"]) <= 1e-6
    assert rep["max_mean_drift"] <= 1e-6
    assert rep["terminal_variance"] <= 1.05


def test_graded_times():
    t = graded_times(0.0, 1.0, 100, focus=4.0)
    assert t[0] == 0.0 and t[-1] == pytest.approx(1.0)
    steps = np.diff(t)
    assert np.all(steps > 0)
    assert steps[-1] < steps[0]
    uniform = graded_times(0.0, 1.0, 10)
    assert np.abs(np.diff(uniform) - 0.1).max() < 1e-12
