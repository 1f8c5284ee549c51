"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines.  Tolerances are pinned here, verbatim from the build contract.
"""

import json
import math
import time

import numpy as np
import pytest
from scipy.integrate import quad

from mbb.costs import CostSpec, grad_legendre, legendre, m_p
from mbb.dual import (
    friendly_giant_profile,
    giant_terminal_check,
    graded_times,
    pme_scheme_residual,
    solve_backward_pme,
    weak_duality_gap,
)
from mbb.experiments import (
    ExperimentConfig,
    closed_form_gaussian_potential,
    gaussian_instance,
    run_experiment,
)
from mbb.fpe import DiffusionField, TestFunction, simulate_sde, solve_fpe, weak_residual
from mbb.grids import DiscreteMeasure, Grid1D, convex_order, convolve, gaussian_kernel, mollify
from mbb.interpolation import dacmoser_cost, dacorogna_moser, strassen_coupling, strassen_report
from mbb.motlp import InfeasibleError, solve_mot_lp
from mbb.primal import (
    PrimalOptions,
    PrimalProblem,
    convolution_contraction_check,
    geodesic_scaling_check,
    solve_primal,
)
from mbb.relaxation import relaxation_convergence

SOLVED_INSTANCES = []  # (label, solution) pairs collected for criterion 6


def _line(num, name, ok, detail):
    status = "PASS" if ok else "FAIL"
    print(f"\nACCEPTANCE {num} [{name}]: {status} -- {detail}")
    return ok


@pytest.fixture(scope="module")
def gaussian_p2():
    mu, nu = gaussian_instance(n_x=200)
    prob = PrimalProblem(mu, nu, CostSpec(p=2.0), n_t=100)
    sol = solve_primal(prob, PrimalOptions(tol=1e-3, max_iters=3000))
    SOLVED_INSTANCES.append(("gaussian p=2", sol))
    return prob, sol


def test_criterion_1_gaussian_transport_exactness(gaussian_p2):
    t0 = time.time()
    prob2, sol2 = gaussian_p2
    ok = abs(sol2.value - 1.0) <= 0.05

    mu, nu = prob2.mu, prob2.nu
    cost3 = CostSpec(p=3.0)
    sol3 = solve_primal(PrimalProblem(mu, nu, cost3, n_t=100),
                        PrimalOptions(tol=1e-3, max_iters=3000))
    SOLVED_INSTANCES.append(("gaussian p=3", sol3))
    ok &= abs(sol3.value - 1.0) <= 0.07

    gaps = {}
    for label, prob, sol in (("p=2", prob2, sol2), ("p=3", PrimalProblem(mu, nu, cost3), sol3)):
        phi, R, c_star = closed_form_gaussian_potential(prob.cost)
        dual = weak_duality_gap(phi, sol.curve, sol.a, prob.cost)
        gaps[label] = sol.value - dual["dual_value"]
        ok &= abs(gaps[label]) <= 0.07 * max(1.0, sol.value)
    elapsed = time.time() - t0
    ok &= elapsed <= 120.0
    assert _line(1, "gaussian exactness", ok,
                 f"value(p=2)={sol2.value:.4f} value(p=3)={sol3.value:.4f} "
                 f"cf-gaps={{p2: {gaps['p=2']:.4f}, p3: {gaps['p=3']:.4f}}} "
                 f"runtime={elapsed:.0f}s")


def test_criterion_2_relaxation_limit():
    t0 = time.time()
    n_paths = 100000
    grid = Grid1D(-40.0, 40.0, 800)
    mu0 = DiscreteMeasure.point_mass(grid, 0.0)
    a = DiffusionField.from_function(lambda t, x: 1.0 + 0.5 * np.sin(x) ** 2,
                                     np.linspace(0, 1, 3), np.linspace(-40, 40, 4001))
    ens = simulate_sde(mu0, a, n_paths=n_paths, dt=1 / 256, seed=7)
    meshes = [0.25, 1 / 16, 1 / 64]
    rows4 = relaxation_convergence(ens, meshes, lambda x: x**4)
    final = rows4[-1]
    ok = final.diff <= max(3 * final.se, 0.02)
    for r_prev, r_next in zip(rows4, rows4[1:]):
        ok &= r_next.diff <= r_prev.diff + 2 * math.hypot(r_prev.se, r_next.se)
    rows2 = relaxation_convergence(ens, meshes, lambda x: x**2)
    ok &= all(r.diff <= 3 * r.se + 1e-9 for r in rows2)
    elapsed = time.time() - t0
    ok &= elapsed <= 300.0
    assert _line(2, "relaxation limit", ok,
                 "quartic diffs=" + str([round(r.diff, 4) for r in rows4])
                 + f" (3SE={3*final.se:.4f}) quadratic max diff="
                 + f"{max(r.diff for r in rows2):.4f} runtime={elapsed:.0f}s")


def test_criterion_3_dacorogna_moser():
    t0 = time.time()
    grid = Grid1D(-10.0, 10.0, 500)
    mu = mollify(DiscreteMeasure.gaussian(grid, 0.0, 1.0), 0.01)
    nu = mollify(DiscreteMeasure.gaussian(grid, 0.0, 2.0), 0.01)
    plan = dacorogna_moser(mu, nu, n_t=64)
    f0 = float(plan.f[grid.cell_of(0.0)])
    f0_target = (math.sqrt(2.0) - 1.0) / math.sqrt(2.0 * math.pi)  # 0.16525
    ok = abs(f0 - f0_target) <= 2e-3

    residuals = [weak_residual(plan.rho, plan.a, tf)
                 for tf in (TestFunction.constant(), TestFunction.linear(),
                            TestFunction.quadratic(), TestFunction.bump(0.5, 1.0))]
    ok &= max(residuals) <= 1e-3

    value, bound = dacmoser_cost(plan, 2.0)
    ok &= value <= bound

    ok &= abs(m_p(3.0, 1.0, 2.0) - 0.5) <= 1e-10
    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(40):
        p, u, v = rng.uniform(1.0, 4.0), rng.uniform(1e-3, 5.0), rng.uniform(1e-3, 5.0)
        ref, _ = quad(lambda t: ((1 - t) * u + t * v) ** (1.0 - p), 0, 1,
                      epsabs=1e-13, epsrel=1e-13)
        worst = max(worst, abs(m_p(p, u, v) - ref))
    ok &= worst <= 1e-10
    elapsed = time.time() - t0
    ok &= elapsed <= 60.0
    assert _line(3, "dacorogna-moser", ok,
                 f"f(0)={f0:.5f} (target {f0_target:.5f}) max residual={max(residuals):.2e} "
                 f"value={value:.4f} bound={bound:.4f} m_p err={worst:.1e} runtime={elapsed:.0f}s")


def test_criterion_4_friendly_giant():
    t0 = time.time()
    q = 2.0
    profile = friendly_giant_profile(q, n_x=2001)
    ok = profile.residual <= 1e-8

    coarse = friendly_giant_profile(q, n_x=801)
    t_sep = graded_times(0.0, 0.9, 600, focus=3.0)
    sep_res = pme_scheme_residual(coarse.u_field(t_sep), t_sep, coarse.x, q)
    ok &= sep_res <= 1e-2

    grid = Grid1D(-1.25, 1.25, 501)
    mu = mollify(DiscreteMeasure.point_mass(grid, 0.0), 0.01)
    # the criterion states a = q u^{q-1}; the conjugate-pair field carries 2q
    rep_stated = giant_terminal_check(q, mu, 0.99, n_t=1500, profile=profile, pressure_scale=q)
    rep_conj = giant_terminal_check(q, mu, 0.99, n_t=1500, profile=profile)
    ok &= rep_stated["mass_near_endpoints"] >= 0.95
    ok &= rep_conj["mass_near_endpoints"] >= 0.95
    ok &= rep_stated["max_mean_drift"] <= 1e-6 and abs(rep_stated["terminal_mean"]) <= 1e-6
    elapsed = time.time() - t0
    ok &= elapsed <= 180.0
    assert _line(4, "friendly giant", ok,
                 f"profile residual={profile.residual:.2e} scheme residual={sep_res:.4f} "
                 f"mass(q u^(q-1))={rep_stated['mass_near_endpoints']:.4f} "
                 f"mass(2q u^(q-1))={rep_conj['mass_near_endpoints']:.4f} "
                 f"|mean|={abs(rep_stated['terminal_mean']):.1e} runtime={elapsed:.0f}s")


def test_criterion_5_strassen_construction():
    t0 = time.time()
    n_paths = 100000
    grid = Grid1D(-2.25, 2.25, 225)
    mu = DiscreteMeasure.point_mass(grid, 0.0)
    nu = DiscreteMeasure.from_atoms(grid, [-1.0, 1.0], [0.5, 0.5])
    coupling = strassen_coupling(mu, nu, eps=0.05, n_paths=n_paths, seed=11)
    # keep bins where the 3*SE gate stays below the 0.05 defect tolerance
    min_mass = 9.0 / (0.05**2 * n_paths)
    rep = strassen_report(coupling, mu, nu, min_cell_mass=min_mass)
    ok = rep["w1_source"] <= 0.1 and rep["w1_target"] <= 0.1
    ok &= rep["conditional_mean_defect"] <= 0.05

    lp = solve_mot_lp(mu, nu, lambda x, y: (y - x) ** 2)
    i0, jm, jp = grid.cell_of(0.0), grid.cell_of(-1.0), grid.cell_of(1.0)
    ok &= abs(lp.value - 1.0) <= 1e-9
    ok &= abs(lp.plan[i0, jm] - 0.5) <= 1e-9 and abs(lp.plan[i0, jp] - 0.5) <= 1e-9
    elapsed = time.time() - t0
    ok &= elapsed <= 120.0
    assert _line(5, "strassen construction", ok,
                 f"W1=({rep['w1_source']:.4f}, {rep['w1_target']:.4f}) "
                 f"defect={rep['conditional_mean_defect']:.4f} lp value={lp.value:.6f} "
                 f"runtime={elapsed:.0f}s")


def test_criterion_6_property_suites(gaussian_p2, tmp_path):
    t0 = time.time()
    details = []

    # Fenchel-Young gap >= 0 with equality exactly at the conjugate gradient
    rng = np.random.default_rng(99)
    cost = CostSpec(p=2.0)
    a = rng.uniform(0, 5, 10000)
    u = rng.uniform(-3, 6, 10000)
    gap = cost(a) + legendre(cost, u) - a * u
    a_star = grad_legendre(cost, u)
    eq_gap = cost(a_star) + legendre(cost, u) - a_star * u
    fenchel_ok = gap.min() >= -1e-12 and np.abs(eq_gap).max() <= 1e-9
    details.append(f"fenchel(min={gap.min():.1e}, eq={np.abs(eq_gap).max():.1e})")

    # convex order <=> LP feasibility on 50 random gridded pairs
    lp_grid = Grid1D(-6.0, 6.0, 60)
    rng = np.random.default_rng(123)
    agree = 0
    for trial in range(50):
        w = rng.uniform(0.1, 1.0, lp_grid.n_cells) * np.exp(
            -0.5 * (lp_grid.centers / rng.uniform(0.5, 1.5)) ** 2)
        mu = DiscreteMeasure(lp_grid, w)
        k = int(rng.integers(1, 5))
        kern_grid = Grid1D(-1.0 - lp_grid.h / 2, 1.0 + lp_grid.h / 2,
                           int(round(2.0 / lp_grid.h)) + 1)
        kernel = DiscreteMeasure.from_atoms(kern_grid, [-k * lp_grid.h, k * lp_grid.h], [0.5, 0.5])
        nu = convolve(mu, kernel)
        pair = (mu, nu) if trial % 2 == 0 else (nu, mu)
        try:
            solve_mot_lp(*pair, lambda x, y: (y - x) ** 2)
            feasible = True
        except InfeasibleError:
            feasible = False
        agree += feasible == convex_order(*pair)
    strassen_ok = agree == 50
    details.append(f"order<=>LP {agree}/50")

    # weak duality on every solved instance collected in this session
    duality_ok = all(sol.dual_value <= sol.value + 1e-8 for _, sol in SOLVED_INSTANCES)
    details.append(f"dual<=primal on {len(SOLVED_INSTANCES)} instances")

    # convolution contraction on the Gaussian instance
    mu_g, nu_g = gaussian_instance(n_x=200)
    sigma = gaussian_kernel(mu_g.grid.h, 0.25)
    contraction = convolution_contraction_check(mu_g, nu_g, sigma, CostSpec(p=2.0), n_t=60,
                                                opts=PrimalOptions(tol=2e-3, max_iters=2500))
    contraction_ok = contraction["contracts"]
    details.append(f"contraction {contraction['value_convolved']:.4f}<={contraction['value_base']:.4f}+eps")

    # geodesic scaling at (0, 1/2) and (1/4, 3/4)
    prob2, sol2 = gaussian_p2
    geo_ok = True
    geo_devs = []
    for s, t in ((0.0, 0.5), (0.25, 0.75)):
        out = geodesic_scaling_check(prob2, sol2, s, t, PrimalOptions(tol=2e-3, max_iters=2500))
        geo_devs.append(out["deviation"])
        geo_ok &= out["deviation"] <= 0.07
    details.append("geodesic devs=" + str([round(d, 4) for d in geo_devs]))

    # porous-medium maximum/comparison principles on nested terminal data
    x = np.linspace(-1, 1, 201)
    u1 = np.maximum(1 - (x / 0.5) ** 2, 0.0) ** 2
    big = solve_backward_pme(u1, q=2.0, r=1.0, n_x=200)
    small = solve_backward_pme(0.5 * u1, q=2.0, r=1.0, n_x=200)
    pme_ok = (big.u.max() <= u1.max() + 1e-9 and big.u.min() >= -1e-12
              and bool(np.all(small.u <= big.u + 1e-9)))
    details.append("pme principles")

    # Fokker-Planck conservation: mass to rounding, mean below 1e-8
    fpe_grid = Grid1D(-8.0, 8.0, 400)
    fpe_curve = solve_fpe(DiscreteMeasure.gaussian(fpe_grid, 0.0, 0.1),
                          DiffusionField.constant(1.0, t=np.linspace(0, 1, 201),
                                                  x=np.array([-8.0, 8.0])))
    fpe_ok = (np.abs(fpe_curve.masses.sum(axis=1) - 1.0).max() <= 1e-10
              and np.abs(fpe_curve.means() - fpe_curve.means()[0]).max() <= 1e-8)
    details.append("fpe conservation")

    # deterministic re-run: bitwise-identical manifests modulo timestamps
    def strip(m):
        d = m.to_dict()
        d.pop("created_at")
        d.pop("runtime_s")
        return json.dumps(d, sort_keys=True)

    cfg_a = ExperimentConfig(name="dacmoser", seed=5, params={"n_x": 250})
    cfg_b = ExperimentConfig(name="strassen", seed=5, params={"n_paths": 2000})
    det_ok = True
    for cfg in (cfg_a, cfg_b):
        m1 = run_experiment(cfg, out_dir=str(tmp_path / (cfg.name + "_1")))
        m2 = run_experiment(cfg, out_dir=str(tmp_path / (cfg.name + "_2")))
        det_ok &= strip(m1) == strip(m2)
    details.append("deterministic manifests")

    elapsed = time.time() - t0
    ok = (fenchel_ok and strassen_ok and duality_ok and contraction_ok and geo_ok
          and pme_ok and fpe_ok and det_ok and elapsed <= 600.0)
    flags = {
        "fenchel": fenchel_ok, "order<=>lp": strassen_ok, "weak duality": duality_ok,
        "contraction": contraction_ok, "geodesic": geo_ok, "pme": pme_ok,
        "fpe": fpe_ok, "deterministic": det_ok,
    }
    assert _line(6, "property suites", ok,
                 "; ".join(details) + f" | flags={flags} runtime={elapsed:.0f}s")
