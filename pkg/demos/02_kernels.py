"""Compare the two covariance parametrisations at the level of one data row.

MCD (modified Cholesky) has closed-form derivatives with a sparse pattern.
logM (matrix logarithm) needs an eigendecomposition and gives a dense Hessian.
At d = 1 the two coincide.
"""
import time

import numpy as np

from gamcov import logm, mcd
from gamcov.layout import build_theta_layout

rng = np.random.default_rng(0)

print("d=1: both parametrisations give log Sigma = eta_2")
layout = build_theta_layout(1)
eta, y = np.array([0.3, -0.4]), np.array([1.1])
print("  MCD ", mcd.mcd_derivs(layout, eta, y)[:2])
print("  logM", logm.logm_derivs(layout, eta, y)[:2])

print("\nMCD Hessian and third-derivative sparsity")
print("   d    q  hess nz/total   third nz/total")
for d in (2, 3, 5, 10, 20):
    sp = mcd.mcd_sparsity(d)
    print(f"{d:4d} {build_theta_layout(d).q:4d}  {sp.n_pairs:6d}/{mcd.hess_total_count(d):<7d}"
          f"{sp.n_triples:7d}/{mcd.third_total_count(d)}")

print("\nlog|Sigma| equals the sum of the diagonal predictors under both maps")
d = 4
layout = build_theta_layout(d)
eta = rng.normal(size=layout.q) * 0.5
for name, S in (("MCD", mcd.mcd_sigma(layout, eta)), ("logM", logm.logm_sigma(layout, eta))):
    print(f"  {name:4s} {np.linalg.slogdet(S)[1]: .12f}  vs  {eta[d:2 * d].sum(): .12f}")

print("\nHessian cost per row (200 rows)")
for d in (5, 10, 20):
    layout = build_theta_layout(d)
    eta = rng.normal(size=(200, layout.q)) * 0.1
    y = rng.normal(size=(200, d))
    t = []
    for fn in (lambda: mcd.mcd_derivs(layout, eta, y, 2), lambda: logm.logm_derivs(layout, eta, y, 2)):
        t0 = time.perf_counter()
        fn()
        t.append((time.perf_counter() - t0) / 200)
    print(f"  d={d:3d}  MCD {t[0] * 1e6:8.1f} us   logM {t[1] * 1e6:9.1f} us   ratio {t[1] / t[0]:6.1f}")
