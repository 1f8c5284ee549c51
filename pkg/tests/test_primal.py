import numpy as np
import pytest

from mbb.costs import CostSpec
from mbb.experiments import closed_form_gaussian_potential, gaussian_instance
from mbb.grids import DiscreteMeasure, Grid1D, gaussian_kernel
from mbb.interpolation import ConvexOrderError, dacorogna_moser, dacmoser_cost
from mbb.primal import (
    PrimalOptions,
    PrimalProblem,
    PrimalSolution,
    _Discretization,
    _perspective_prox,
    geodesic_scaling_check,
    solve_primal,
)
from mbb.dual import weak_duality_gap

FAST = PrimalOptions(tol=2e-3, max_iters=2500, check_every=100)


@pytest.fixture(scope="module")
def small_gaussian_solution():
    mu, nu = gaussian_instance(n_x=100)
    prob = PrimalProblem(mu, nu, CostSpec(p=2.0), n_t=50)
    return prob, solve_primal(prob, FAST)


def test_identity_marginals(grid400):
    rho = DiscreteMeasure.gaussian(grid400, 0.0, 0.5)
    sol = solve_primal(PrimalProblem(rho, rho, CostSpec(p=2.0), n_t=10), FAST)
    assert sol.value <= 1e-8
    assert sol.converged


def test_gaussian_value_and_certificates(small_gaussian_solution):
    prob, sol = small_gaussian_solution
    assert sol.value == pytest.approx(1.0, rel=0.05)
    assert sol.converged
    assert sol.dual_value <= sol.value + 1e-9  # weak duality
    assert sol.residual <= 1e-4
    # feasible reference: the explicit interpolation upper-bounds the optimum
    plan = dacorogna_moser(prob.mu, prob.nu, n_t=16, density_floor=1e-300)
    dm_value, _ = dacmoser_cost(plan, 2.0)
    assert sol.value <= dm_value + sol.gap + 1e-9


def test_gaussian_closed_form_dual(small_gaussian_solution):
    prob, sol = small_gaussian_solution
    phi, R, c_star = closed_form_gaussian_potential(prob.cost)
    assert R == pytest.approx(4.0) and c_star == pytest.approx(1.0)
    out = weak_duality_gap(phi, sol.curve, sol.a, prob.cost)
    assert out["dual_value"] == pytest.approx(1.0, abs=0.02)
    assert sol.value - out["dual_value"] <= 0.07 * max(1.0, sol.value)


def test_curve_conservation(small_gaussian_solution):
    _, sol = small_gaussian_solution
    assert np.abs(sol.curve.masses.sum(axis=1) - 1.0).max() <= 1e-9
    means = sol.curve.means()
    assert np.abs(means - means[0]).max() <= 1e-5
    assert np.all(np.diff(sol.curve.variances()) >= -1e-6)


def test_objective_joint_convexity():
    mu, nu = gaussian_instance(n_x=100)
    disc = _Discretization(PrimalProblem(mu, nu, CostSpec(p=2.0), n_t=8))
    rng = np.random.default_rng(3)
    for _ in range(5):
        rho1 = rng.uniform(0.01, 1.0, (disc.n_t - 1, disc.n_x))
        rho2 = rng.uniform(0.01, 1.0, (disc.n_t - 1, disc.n_x))
        m1 = rng.uniform(0.0, 1.0, (disc.n_t, disc.n_x))
        m2 = rng.uniform(0.0, 1.0, (disc.n_t, disc.n_x))
        mid = disc.objective(0.5 * (rho1 + rho2), 0.5 * (m1 + m2))
        avg = 0.5 * disc.objective(rho1, m1) + 0.5 * disc.objective(rho2, m2)
        assert mid <= avg + 1e-9


def test_perspective_prox_cases():
    cost = CostSpec(p=2.0)
    # inside the conjugate set -> (0, 0); negative flux direction -> flux 0
    m, r = _perspective_prox(np.array([-1.0]), np.array([-1.0]), 0.5, cost)
    assert m[0] == 0.0 and r[0] == 0.0
    m, r = _perspective_prox(np.array([-1.0]), np.array([2.0]), 0.5, cost)
    assert m[0] == 0.0 and r[0] == 2.0
    # interior case satisfies the stationarity conditions
    gamma = 0.3
    m, r = _perspective_prox(np.array([1.0]), np.array([0.5]), gamma, cost)
    a = m[0] / r[0]
    assert m[0] + gamma * 2.0 * a == pytest.approx(1.0, abs=1e-9)
    assert r[0] - gamma * a * a == pytest.approx(0.5, abs=1e-9)
    # prox output always lies in the perspective domain
    rng = np.random.default_rng(8)
    mt = rng.normal(size=1000)
    rt = rng.normal(size=1000)
    m, r = _perspective_prox(mt, rt, 0.2, CostSpec(p=3.0))
    assert m.min() >= 0 and r.min() >= 0
    assert np.all(m[r == 0] == 0)


def test_infeasible_raises(two_point, delta0):
    with pytest.raises(ConvexOrderError):
        solve_primal(PrimalProblem(two_point, delta0, CostSpec(p=2.0), n_t=8), FAST)


def test_grid_refinement_consistency():
    values = {}
    for n_x, n_t in ((100, 50), (200, 100)):
        mu, nu = gaussian_instance(n_x=n_x)
        sol = solve_primal(PrimalProblem(mu, nu, CostSpec(p=2.0), n_t=n_t), FAST)
        values[(n_x, n_t)] = (sol.value, sol.gap)
    (v1, g1), (v2, g2) = values.values()
    assert abs(v1 - v2) <= 0.02 + g1 + g2


def test_geodesic_scaling_small(small_gaussian_solution):
    prob, sol = small_gaussian_solution
    out = geodesic_scaling_check(prob, sol, 0.0, 0.5, FAST)
    assert out["deviation"] <= 0.07
    full = geodesic_scaling_check(prob, sol, 0.0, 1.0, FAST)
    assert full["deviation"] <= 0.02  # re-solve of the full problem


def test_solution_reporting(small_gaussian_solution):
    _, sol = small_gaussian_solution
    assert isinstance(sol, PrimalSolution)
    assert sol.relative_gap == pytest.approx(sol.gap / (1 + abs(sol.value)))
    csv = sol.log_csv()
    assert csv.splitlines()[0] == "iteration,value,dual_value,residual"
    assert len(csv.splitlines()) == len(sol.log) + 1
    # recovered diffusion field is nonnegative and zero where mass vanishes
    assert sol.a.values.min() >= 0.0
