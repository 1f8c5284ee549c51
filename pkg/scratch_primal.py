import time

import numpy as np

from mbb.costs import CostSpec
from mbb.grids import DiscreteMeasure, Grid1D, convolve, gaussian_kernel, mollify, resample
from mbb.primal import PrimalOptions, PrimalProblem, solve_primal

g = Grid1D(-8, 8, 200)
mu = mollify(DiscreteMeasure.point_mass(g, 0.0), 0.05)
nu = resample(convolve(mu, gaussian_kernel(g.h, 1.0)), g)
print("var mu:", mu.variance, "var nu:", nu.variance)

for p in (2.0,):
    prob = PrimalProblem(mu, nu, CostSpec(p=p), n_t=100)
    t0 = time.time()
    opts = PrimalOptions(tol=5e-3, max_iters=6000, check_every=200)
    sol = solve_primal(prob, opts)
    t1 = time.time()
    print(f"p={p}: value={sol.value:.5f} dual={sol.dual_value:.5f} gap={sol.gap:.4f} "
          f"res={sol.residual:.2e} iters={sol.iterations} conv={sol.converged} time={t1-t0:.1f}s")
    for row in sol.log[:3] + sol.log[-3:]:
        print("   log:", row)
