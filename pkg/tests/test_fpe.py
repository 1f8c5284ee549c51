import numpy as np
import pytest

from mbb.fpe import (
    CFLViolationError,
    DiffusionField,
    TestFunction,
    marginal_distance,
    simulate_sde,
    solve_fpe,
    weak_residual,
)
from mbb.grids import DiscreteMeasure, Grid1D, mollify


def heat_field(n_t=101, lo=-8.0, hi=8.0):
    return DiffusionField.constant(1.0, t=np.linspace(0, 1, n_t), x=np.array([lo, hi]))


def test_zero_diffusion_is_static(grid400):
    mu0 = DiscreteMeasure.gaussian(grid400, 0.0, 0.5)
    a0 = DiffusionField.constant(0.0, t=np.linspace(0, 1, 11), x=np.array([-8.0, 8.0]))
    curve = solve_fpe(mu0, a0)
    assert np.abs(curve.masses - mu0.weights[None, :]).max() < 1e-14


@pytest.mark.parametrize("scheme,n_t", [("implicit", 101), ("explicit", 2001)])
def test_heat_variance_growth(grid400, scheme, n_t):
    mu0 = DiscreteMeasure.gaussian(grid400, 0.0, 0.1)
    curve = solve_fpe(mu0, heat_field(n_t), scheme=scheme)
    dt = 1.0 / (n_t - 1)
    tol = 2 * grid400.h**2 + dt
    assert curve.variances()[-1] - curve.variances()[0] == pytest.approx(1.0, abs=tol)
    # mass conserved and mean preserved
    assert np.abs(curve.masses.sum(axis=1) - 1).max() < 1e-10
    assert np.abs(curve.means() - curve.means()[0]).max() < 1e-8
    # symmetric initial data stay symmetric
    assert np.abs(curve.masses[-1] - curve.masses[-1][::-1]).max() < 1e-10


def test_second_moment_monotone(grid400):
    mu0 = DiscreteMeasure.gaussian(grid400, 0.0, 0.1)
    curve = solve_fpe(mu0, heat_field())
    assert np.all(np.diff(curve.variances()) >= -1e-12)


def test_cfl_guard(grid400):
    mu0 = DiscreteMeasure.gaussian(grid400, 0.0, 0.1)
    with pytest.raises(CFLViolationError):
        solve_fpe(mu0, heat_field(11), scheme="explicit")  # dt/h^2 = 62.5


def test_point_mass_is_mollified(grid400):
    d0 = DiscreteMeasure.point_mass(grid400, 0.0)
    curve = solve_fpe(d0, heat_field())
    assert curve.variances()[0] == pytest.approx(4 * grid400.h**2, rel=0.2)


def test_weak_residuals(grid400):
    mu0 = DiscreteMeasure.gaussian(grid400, 0.0, 0.1)
    a = heat_field(201)
    curve = solve_fpe(mu0, a)
    assert weak_residual(curve, a, TestFunction.constant()) < 1e-10
    assert weak_residual(curve, a, TestFunction.linear()) < 1e-8
    dt = 1.0 / 200
    assert weak_residual(curve, a, TestFunction.quadratic()) <= 2 * (dt + grid400.h**2)
    assert weak_residual(curve, a, TestFunction.bump(0.3, 0.8)) <= 2 * (dt + grid400.h**2)


def test_variance_identity_variable_field(grid400):
    # var(rho_1) - var(rho_0) = int int a drho dt (Ito isometry)
    mu0 = DiscreteMeasure.gaussian(grid400, 0.0, 0.2)
    t = np.linspace(0, 1, 201)
    a = DiffusionField.from_function(lambda s, x: 1.0 + 0.5 * np.sin(x) ** 2,
                                     t, np.linspace(-8, 8, 801))
    curve = solve_fpe(mu0, a)
    qv = 0.0
    for k in range(len(t) - 1):
        tm = 0.5 * (t[k] + t[k + 1])
        rho_m = 0.5 * (curve.masses[k] + curve.masses[k + 1])
        qv += (t[k + 1] - t[k]) * float(a.at(tm, grid400.centers) @ rho_m)
    gain = curve.variances()[-1] - curve.variances()[0]
    assert gain == pytest.approx(qv, abs=2 * (1.0 / 200 + grid400.h**2))


def test_sde_constant_paths_when_a_zero(grid400):
    d0 = DiscreteMeasure.point_mass(grid400, 0.0)
    a0 = DiffusionField.constant(0.0, t=np.linspace(0, 1, 3), x=np.array([-8.0, 8.0]))
    ens = simulate_sde(d0, a0, n_paths=100, dt=1 / 64, seed=1)
    assert np.abs(np.diff(np.asarray(ens.X, dtype=float), axis=1)).max() == 0.0


def test_sde_brownian_moments(grid400):
    d0 = DiscreteMeasure.point_mass(grid400, 0.0)
    n_paths, dt = 20000, 1 / 256
    ens = simulate_sde(d0, heat_field(3), n_paths=n_paths, dt=dt, seed=7)
    x1 = ens.positions_at(1.0)
    assert x1.var() == pytest.approx(1.0, abs=3 * (np.sqrt(2 / n_paths) + dt))
    assert x1.mean() == pytest.approx(d0.mean, abs=3 / np.sqrt(n_paths))


def test_sde_deterministic_and_chunk_independent(grid400):
    mu0 = DiscreteMeasure.gaussian(grid400, 0.0, 0.3)
    a = heat_field(3)
    e1 = simulate_sde(mu0, a, n_paths=600, dt=1 / 32, seed=3, chunk=600)
    e2 = simulate_sde(mu0, a, n_paths=600, dt=1 / 32, seed=3, chunk=77)
    assert np.array_equal(e1.X, e2.X)
    assert np.array_equal(e1.qv_rate, e2.qv_rate)
    e3 = simulate_sde(mu0, a, n_paths=600, dt=1 / 32, seed=4)
    assert not np.array_equal(e1.X, e3.X)


def test_marginal_distance(grid400):
    d0 = DiscreteMeasure.point_mass(grid400, 0.0)
    a = heat_field(65)
    ens = simulate_sde(d0, a, n_paths=4000, dt=1 / 128, seed=2)
    dh = DiscreteMeasure.point_mass(grid400, grid400.h)
    start = DiscreteMeasure.point_mass(grid400, 0.0)
    # identical laws and a one-cell translation
    assert marginal_distance(ens, 0.0, start) <= grid400.h  # binning error only
    curve = solve_fpe(mollify(d0, 4 * grid400.h**2), a)
    w = marginal_distance(ens, 1.0, curve.measure(curve.n_times - 1))
    assert w <= 0.05


def test_marginal_distance_refinement(grid400):
    # W1 between the SDE marginal and the FPE marginal shrinks as both refine
    d0 = mollify(DiscreteMeasure.point_mass(grid400, 0.0), 0.05)
    a = heat_field(401)
    curve = solve_fpe(d0, a)
    rho1 = curve.measure(curve.n_times - 1)
    coarse = simulate_sde(d0, a, n_paths=2000, dt=1 / 32, seed=9)
    fine = simulate_sde(d0, a, n_paths=20000, dt=1 / 256, seed=9)
    w_coarse = marginal_distance(coarse, 1.0, rho1)
    w_fine = marginal_distance(fine, 1.0, rho1)
    assert w_fine <= w_coarse + 0.01  # monotone within MC noise


def test_diffusion_field_serialization_and_sampling():
    t = np.linspace(0, 1, 5)
    x = np.linspace(-2, 2, 9)
    a = DiffusionField.from_function(lambda s, y: 1.0 + s + 0.1 * y**2, t, x)
    again = DiffusionField.from_dict(a.to_dict())
    assert np.array_equal(again.values, a.values)
    # bilinear sample agrees with row-wise interpolation
    pts_t = np.array([0.1, 0.6, 0.9])
    pts_x = np.array([-1.3, 0.2, 1.7])
    direct = np.array([a.at(s, xx) for s, xx in zip(pts_t, pts_x)])
    assert np.abs(a.sample(pts_t, pts_x) - direct).max() < 1e-12
    # zero extension outside the spatial hull
    assert a.at(0.5, 5.0) == 0.0
    assert a.sample(np.array([0.5]), np.array([-9.0]))[0] == 0.0
    csv = a.to_csv()
    assert csv.splitlines()[0] == "t,x,value"


def test_mass_leak_is_reported():
    grid = Grid1D(-1.0, 1.0, 50)
    mu0 = DiscreteMeasure.gaussian(grid, 0.0, 0.2)
    with pytest.raises(RuntimeError, match="mass drifted"):
        solve_fpe(mu0, DiffusionField.constant(1.0, t=np.linspace(0, 1, 101),
                                               x=np.array([-1.0, 1.0])))
