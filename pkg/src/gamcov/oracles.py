"""Brute-force reference computations used to validate the kernels.

Nothing here shares code with the kernels beyond numpy scalar maths: the
log-density goes through a Cholesky factor of a dense covariance, the matrix
exponential through Pade scaling and squaring, and derivatives through
central differences.
"""
from __future__ import annotations

from math import comb

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve

from .exceptions import NumericError

# Pade(13) coefficients, Higham (2005)
_PADE13 = np.array([
    64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
    1187353796428800.0, 129060195264000.0, 10559470521600.0,
    670442572800.0, 33522128640.0, 1323241920.0, 40840800.0,
    960960.0, 16380.0, 182.0, 1.0,
])
_THETA13 = 5.371920351148152


def dense_loglik_oracle(mu, Sigma, y) -> float:
    """``-1/2 log|Sigma| - 1/2 r' Sigma^{-1} r`` through a Cholesky factor."""
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    r = np.atleast_1d(np.asarray(y, dtype=float) - np.asarray(mu, dtype=float))
    try:
        c, low = cho_factor(Sigma, lower=True)
    except np.linalg.LinAlgError:
        raise NumericError("covariance matrix is not positive definite") from None
    logdet = 2.0 * np.sum(np.log(np.diag(c)))
    return float(-0.5 * logdet - 0.5 * r @ cho_solve((c, low), r))


def matrix_exp_oracle(theta) -> np.ndarray:
    """Matrix exponential by scaling and squaring with a degree-13 Pade approximant."""
    A = np.atleast_2d(np.asarray(theta, dtype=float))
    n = A.shape[0]
    norm = np.linalg.norm(A, 1)
    s = 0
    if norm > _THETA13:
        s = int(np.ceil(np.log2(norm / _THETA13)))
    A = A / 2.0 ** s
    b = _PADE13
    ident = np.eye(n)
    A2 = A @ A
    A4 = A2 @ A2
    A6 = A4 @ A2
    U = A @ (A6 @ (b[13] * A6 + b[11] * A4 + b[9] * A2)
             + b[7] * A6 + b[5] * A4 + b[3] * A2 + b[1] * ident)
    V = A6 @ (b[12] * A6 + b[10] * A4 + b[8] * A2) + b[6] * A6 + b[4] * A4 + b[2] * A2 + b[0] * ident
    E = solve(V - U, V + U)
    for _ in range(s):
        E = E @ E
    return E


def sigma_from_theta_oracle(theta) -> np.ndarray:
    E = matrix_exp_oracle(theta)
    return 0.5 * (E + E.T)


def mcd_sigma_oracle(d: int, eta_row) -> np.ndarray:
    """MCD covariance from an explicit double loop over the ``T`` slots."""
    eta_row = np.asarray(eta_row, dtype=float)
    T = np.eye(d)
    m = 2 * d
    for j in range(1, d):
        for k in range(j):
            T[j, k] = eta_row[m]
            m += 1
    D2 = np.diag(np.exp(eta_row[d:2 * d]))
    Tinv = np.linalg.inv(T)
    return Tinv @ D2 @ Tinv.T


def logm_sigma_oracle(d: int, eta_row) -> np.ndarray:
    eta_row = np.asarray(eta_row, dtype=float)
    theta = np.diag(eta_row[d:2 * d])
    m = 2 * d
    for j in range(1, d):
        for k in range(j):
            theta[j, k] = theta[k, j] = eta_row[m]
            m += 1
    return sigma_from_theta_oracle(theta)


def _steps(x, h):
    return h * (1.0 + np.abs(x))


def fd_derivs(fn, eta_row, y_row=None, order: int = 1, h: float | None = None) -> np.ndarray:
    """Central finite-difference derivative tensor of a scalar function.

    ``fn(eta)`` (or ``fn(eta, y)`` when ``y_row`` is given) must return a
    scalar.  Steps are ``h * (1 + |eta_i|)``; order 3 applies the order-2
    stencil at shifted points.
    """
    x0 = np.asarray(eta_row, dtype=float).copy()
    f = (lambda e: float(fn(e))) if y_row is None else (lambda e: float(fn(e, y_row)))
    if h is None:
        h = 1e-4 if order == 3 else 1e-5
    q = x0.size
    st = _steps(x0, h)

    def grad_at(x):
        g = np.empty(q)
        for i in range(q):
            xp, xm = x.copy(), x.copy()
            xp[i] += st[i]
            xm[i] -= st[i]
            g[i] = (f(xp) - f(xm)) / (2 * st[i])
        return g

    def hess_at(x):
        H = np.empty((q, q))
        for i in range(q):
            for j in range(i, q):
                if i == j:
                    xp, xm = x.copy(), x.copy()
                    xp[i] += st[i]
                    xm[i] -= st[i]
                    H[i, i] = (f(xp) - 2 * f(x) + f(xm)) / st[i] ** 2
                else:
                    vals = 0.0
                    for si, sj, sign in ((1, 1, 1), (1, -1, -1), (-1, 1, -1), (-1, -1, 1)):
                        xx = x.copy()
                        xx[i] += si * st[i]
                        xx[j] += sj * st[j]
                        vals += sign * f(xx)
                    H[i, j] = H[j, i] = vals / (4 * st[i] * st[j])
        return H

    if order == 1:
        return grad_at(x0)
    if order == 2:
        return hess_at(x0)
    if order == 3:
        out = np.empty((q, q, q))
        for k in range(q):
            xp, xm = x0.copy(), x0.copy()
            xp[k] += st[k]
            xm[k] -= st[k]
            out[:, :, k] = (hess_at(xp) - hess_at(xm)) / (2 * st[k])
        return out
    raise ValueError(f"order must be 1, 2 or 3, got {order}")


def fd_jacobian(fn, x0, h: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of a vector-valued function (rows = outputs)."""
    x0 = np.asarray(x0, dtype=float)
    st = _steps(x0, h)
    cols = []
    for i in range(x0.size):
        xp, xm = x0.copy(), x0.copy()
        xp[i] += st[i]
        xm[i] -= st[i]
        cols.append((np.asarray(fn(xp)) - np.asarray(fn(xm))) / (2 * st[i]))
    return np.stack(cols, axis=-1)


def naive_design_assembly(designs, grad_eta, hess_eta_dense):
    """Gradient and Hessian w.r.t. beta from dense per-row eta derivatives.

    ``designs`` are dense ``(n, p_j)`` matrices, ``grad_eta`` is ``(n, q)`` and
    ``hess_eta_dense`` ``(n, q, q)``.  One pass, no blocking, explicit sums.
    """
    Xfull = np.hstack(designs)
    n = Xfull.shape[0]
    widths = [X.shape[1] for X in designs]
    off = np.concatenate([[0], np.cumsum(widths)])
    p = off[-1]
    g = np.zeros(p)
    H = np.zeros((p, p))
    for i in range(n):
        for j, Xj in enumerate(designs):
            g[off[j]:off[j + 1]] += Xj[i] * grad_eta[i, j]
            for k, Xk in enumerate(designs):
                H[off[j]:off[j + 1], off[k]:off[k + 1]] += hess_eta_dense[i, j, k] * np.outer(Xj[i], Xk[i])
    return g, H


def naive_c_term(designs, Htilde, third_dense, eta_lambda):
    """``sum_jk tr(Htilde_jk X^k' W^{jk} X^j)`` with ``W^{jk}`` formed explicitly."""
    widths = [X.shape[1] for X in designs]
    off = np.concatenate([[0], np.cumsum(widths)])
    q = len(designs)
    total = 0.0
    for j in range(q):
        for k in range(q):
            Wjk = np.einsum("il,il->i", third_dense[:, j, k, :], eta_lambda)
            M = designs[k].T @ np.diag(Wjk) @ designs[j]
            total += np.trace(Htilde[off[j]:off[j + 1], off[k]:off[k + 1]] @ M)
    return float(total)


def gaussian_ridge_evidence(X, y, sigma2, lam, S) -> float:
    """Exact log marginal likelihood of ``y ~ N(X b, sigma2 I)`` with ``b ~ N(0, (lam S)^{-1})``.

    Computed from the marginal ``y ~ N(0, sigma2 I + X (lam S)^{-1} X')``,
    so it never touches the posterior mode; ``S`` must be positive definite.
    """
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    n = X.shape[0]
    prior_cov = np.linalg.inv(lam * np.asarray(S, float))
    C = sigma2 * np.eye(n) + X @ prior_cov @ X.T
    return dense_loglik_oracle(np.zeros(n), C, y) - 0.5 * n * np.log(2 * np.pi)


def n_unique(q: int, order: int) -> int:
    return comb(q + order - 1, order)
