import time

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from mbb.costs import CostSpec
from mbb.grids import DiscreteMeasure, Grid1D, convolve, gaussian_kernel, mollify, resample
from mbb.primal import _Discretization, _perspective_prox, _fixed_denominator_prox, _warm_start, PrimalProblem

g = Grid1D(-8, 8, 200)
mu = mollify(DiscreteMeasure.point_mass(g, 0.0), 0.05)
nu = resample(convolve(mu, gaussian_kernel(g.h, 1.0)), g)
p = 3.0
prob = PrimalProblem(mu, nu, CostSpec(p=p), n_t=100)
disc = _Discretization(prob)
n_t, n_x, s = disc.n_t, disc.n_x, disc.s

# Build sparse K
t0 = time.time()
rows, cols, vals = [], [], []
off_m = (n_t - 1) * n_x
for k in range(n_t):
    for j in range(n_x):
        r = k * n_x + j
        if k + 1 <= n_t - 1:
            rows.append(r); cols.append(k * n_x + j); vals.append(1.0)
        if k >= 1:
            rows.append(r); cols.append((k - 1) * n_x + j); vals.append(-1.0)
        # -s * D2 m^k
        rows.append(r); cols.append(off_m + k * n_x + j); vals.append(2.0 * s)
        if j - 1 >= 0:
            rows.append(r); cols.append(off_m + k * n_x + j - 1); vals.append(-s)
        if j + 1 < n_x:
            rows.append(r); cols.append(off_m + k * n_x + j + 1); vals.append(-s)
K = sp.csr_matrix((vals, (rows, cols)), shape=(n_t * n_x, (2 * n_t - 1) * n_x))
KKT = (K @ K.T).tocsc()
print("build K:", time.time() - t0, "nnz KKT:", KKT.nnz)
t0 = time.time()
lu = spla.splu(KKT)
print("splu:", time.time() - t0)

b = np.zeros((n_t, n_x)); b[0] = disc.mu; b[-1] = -disc.nu

def proj(rho, m):
    r = disc.K(rho, m) - b
    y = lu.solve(r.ravel()).reshape(n_t, n_x)
    dr, dm = disc.Kt(y)
    return rho - dr, m - dm, y

rho0, m0 = _warm_start(disc, prob)
print("warm residual:", np.abs(disc.residual(rho0, m0)).max())
print("warm objective:", disc.objective(rho0, m0))

gamma = 0.05
z_rho, z_m = rho0.copy(), m0.copy()
t0 = time.time()
for it in range(1, 1501):
    xb_rho, xb_m, y = proj(z_rho, z_m)
    r_rho = 2 * xb_rho - z_rho
    r_m = 2 * xb_m - z_m
    y_m = np.empty_like(r_m)
    y_m[0] = _fixed_denominator_prox(r_m[0], disc.mu, gamma * disc.dt, disc.cost)
    y_m[1:], y_rho = _perspective_prox(r_m[1:], r_rho, gamma * disc.dt, disc.cost)
    z_rho += y_rho - xb_rho
    z_m += y_m - xb_m
    if it % 200 == 0:
        val = disc.objective(y_rho, y_m)
        res = np.abs(disc.residual(y_rho, y_m)).max()
        u_rho = (z_rho - xb_rho) / gamma
        u_m = (z_m - xb_m) / gamma
        phi = lu.solve(disc.K(u_rho, u_m).ravel()).reshape(n_t, n_x)
        dval, V = disc.dual_certificate(phi)
        print(f"it={it} val={val:.5f} dual={dval:.5f} res={res:.2e} V={V:.2e} t={time.time()-t0:.1f}s")
