"""Matrix-logarithm (logM) kernel.

``Sigma = exp(Theta)`` with ``Theta = U diag(gamma) U'``.  With ``s = U' r``
the log-likelihood (without the Gaussian constant) is
``-1/2 tr(Theta) - 1/2 s' diag(exp(-gamma)) s``.  First and second
derivatives of ``exp(-Theta)`` are expressed through first and second
divided differences of ``x -> exp(-x)`` over the eigenvalues.

Hessians are dense; they are stored as the upper triangle in row-major
order so that they line up with the MCD pair layout.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .exceptions import DataError, NumericError, ParameterRangeError, ShapeError
from .layout import ThetaLayout, theta_from_eta

EXP_LIMIT = 700.0
TAYLOR_SPAN = 1e-3
DEGENERACY_RTOL = 1e-8


# --------------------------------------------------------------------------- divided differences


def divided_diff1(a, b):
    """``Delta(a, b) = (e^{-b} - e^{-a}) / (a - b)``, equal to ``e^{-a}`` when ``a == b``.

    Written as ``e^{-m} sinh(t)/t`` with ``m`` the midpoint and ``t`` the
    half gap, which is accurate for every gap.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    m = 0.5 * (a + b)
    t = 0.5 * np.abs(a - b)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(t > 0, np.sinh(t) / np.where(t > 0, t, 1.0), 1.0)
    return np.exp(-m) * ratio


def divided_diff2(a, b, c):
    """Second divided difference of ``x -> e^{-x}`` (symmetric in its arguments).

    Points are sorted; when the spread is below ``TAYLOR_SPAN`` a Taylor series
    about the mean in complete homogeneous polynomials of the deviations is
    used, otherwise ``(Delta(x0, x1) - Delta(x1, x2)) / (x2 - x0)``.
    """
    pts = np.sort(np.stack(np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float),
                                                np.asarray(c, float)), axis=-1), axis=-1)
    x0, x1, x2 = pts[..., 0], pts[..., 1], pts[..., 2]
    span = x2 - x0
    small = span < TAYLOR_SPAN
    out = np.empty(span.shape)
    big = ~small
    if big.any():
        out[big] = (divided_diff1(x0[big], x1[big]) - divided_diff1(x1[big], x2[big])) / span[big]
    if small.any():
        p = pts[small]
        m = p.mean(axis=-1)
        dev = p - m[..., None]
        p1 = dev.sum(-1)
        p2 = (dev ** 2).sum(-1)
        p3 = (dev ** 3).sum(-1)
        p4 = (dev ** 4).sum(-1)
        p5 = (dev ** 5).sum(-1)
        h1 = p1
        h2 = (h1 * p1 + p2) / 2
        h3 = (h2 * p1 + h1 * p2 + p3) / 3
        h4 = (h3 * p1 + h2 * p2 + h1 * p3 + p4) / 4
        h5 = (h4 * p1 + h3 * p2 + h2 * p3 + h1 * p4 + p5) / 5
        out[small] = np.exp(-m) * (0.5 - h1 / 6 + h2 / 24 - h3 / 120 + h4 / 720 - h5 / 5040)
    return out


def _degenerate(gamma):
    """Boolean ``(n, d, d)`` mask of eigenvalue pairs below the degeneracy threshold."""
    scale = 1.0 + np.max(np.abs(gamma), axis=-1)[:, None, None]
    return np.abs(gamma[:, :, None] - gamma[:, None, :]) < DEGENERACY_RTOL * scale


def delta_table(gamma) -> np.ndarray:
    """``(n, d, d)`` table of first divided differences with the degenerate limit applied."""
    g = np.atleast_2d(gamma)
    D = divided_diff1(g[:, :, None], g[:, None, :])
    deg = _degenerate(g)
    lim = np.exp(-0.5 * (g[:, :, None] + g[:, None, :]))
    return np.where(deg, lim, D)


def second_table(gamma) -> np.ndarray:
    """``G[n, i, t, j]`` = second divided difference at ``(gamma_i, gamma_t, gamma_j)``."""
    g = np.atleast_2d(gamma)
    return divided_diff2(g[:, :, None, None], g[:, None, :, None], g[:, None, None, :])


# --------------------------------------------------------------------------- workspace


@dataclass
class EigenWorkspace:
    """Eigen quantities for a stack of ``n`` observations (leading axis)."""

    U: np.ndarray          # (n, d, d)
    gamma: np.ndarray      # (n, d)
    L: np.ndarray          # (n, d) exp(-gamma)
    s: np.ndarray          # (n, d) U' r
    F: np.ndarray          # (n, d, d) U diag(s)
    Delta: np.ndarray      # (n, d, d)
    DeltaTilde: np.ndarray  # (n, d, d) (Delta_jk - Delta_kk) / (gamma_j - gamma_k)
    Pi: np.ndarray         # (n, d, d) F Delta
    Xi: np.ndarray         # (n, d, d) F Delta F'

    @property
    def n(self) -> int:
        return self.gamma.shape[0]

    @property
    def d(self) -> int:
        return self.gamma.shape[1]


def _eigh(theta: np.ndarray, row_offset: int = 0):
    try:
        return np.linalg.eigh(theta)
    except np.linalg.LinAlgError:
        for i in range(theta.shape[0]):
            try:
                np.linalg.eigh(theta[i])
            except np.linalg.LinAlgError:
                raise NumericError("eigendecomposition failed to converge", row=row_offset + i) from None
        raise NumericError("eigendecomposition failed to converge") from None


def logm_eigen(theta, r, eig=None, row_offset: int = 0) -> EigenWorkspace:
    """Build the workspace for one ``(d, d)`` matrix or a stack ``(n, d, d)``.

    ``eig=(gamma, U)`` bypasses the eigensolver, which lets callers supply an
    alternative (e.g. sign-flipped or rotated) eigenbasis.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.ndim == 2:
        theta = theta[None]
    r = np.atleast_2d(np.asarray(r, dtype=float))
    if theta.shape[-1] != theta.shape[-2] or r.shape != theta.shape[:2]:
        raise ShapeError(f"incompatible shapes {theta.shape} and {r.shape}")
    asym = np.abs(theta - np.swapaxes(theta, -1, -2)).max(initial=0.0)
    if asym > 1e-12 * (1.0 + np.abs(theta).max(initial=0.0)):
        raise ShapeError("parametrisation matrix is not symmetric")
    if eig is None:
        gamma, U = _eigh(theta, row_offset)
    else:
        gamma, U = (np.atleast_2d(np.asarray(eig[0], float)), np.asarray(eig[1], float))
        if U.ndim == 2:
            U = U[None]
    if np.any(np.abs(gamma) > EXP_LIMIT):
        row = int(np.flatnonzero(np.any(np.abs(gamma) > EXP_LIMIT, axis=1))[0])
        raise ParameterRangeError(f"eigenvalue of the parametrisation matrix beyond +-{EXP_LIMIT:g} "
                                  f"in row {row_offset + row}")
    L = np.exp(-gamma)
    s = np.einsum("nji,nj->ni", U, r)
    F = U * s[:, None, :]
    Delta = delta_table(gamma)
    d = gamma.shape[1]
    # Delta~_jk = -g[j, k, k]; its diagonal limit is -exp(-gamma_j)/2
    gj = gamma[:, :, None] + np.zeros((1, 1, d))
    gk = gamma[:, None, :] + np.zeros((1, d, 1))
    DeltaTilde = -divided_diff2(gj, gk, gk)
    Pi = F @ Delta
    Xi = Pi @ np.swapaxes(F, -1, -2)
    return EigenWorkspace(U, gamma, L, s, F, Delta, DeltaTilde, Pi, Xi)


@dataclass
class KTables:
    """Third-order contraction tables (all batched over rows).

    ``K[n, r, s, t] = sum_ij F_ri F_sj g(gamma_i, gamma_t, gamma_j)`` with ``g``
    the second divided difference of ``exp(-x)``, split by coincidences of
    ``i, j`` with ``t``:

    * ``i = j = t``: ``F_rt F_st Delta_tt / 2``
    * exactly one of ``i, j`` equal to ``t``: ``F_rt A_st + F_st A_rt`` with
      ``A_st = sum_{j != t} F_sj g(t, t, j) = -(F Delta~)_st``
    * ``i = j != t``: ``A'_rst = sum_{k != t} F_rk F_sk g(t, k, k)``
    * ``i, j, t`` all distinct: ``A''_{..t} = F Dstar_t F'`` with
      ``Dstar_t[i, j] = g(i, t, j)``.
    """

    A: np.ndarray        # (n, d, d)
    Aprime: np.ndarray   # (n, d, d, d)
    Adoubleprime: np.ndarray  # (n, d, d, d)
    K: np.ndarray        # (n, d, d, d)
    Dstar: np.ndarray    # (n, d, d, d) indexed [n, i, t, j], zero unless all distinct


def build_ktables(ws: EigenWorkspace) -> KTables:
    n, d = ws.n, ws.d
    F = ws.F
    G = second_table(ws.gamma)  # [n, i, t, j]
    eye = np.eye(d, dtype=bool)
    # A_st = sum_{j != t} F_sj g(t, t, j)
    gttj = G[:, np.arange(d), np.arange(d), :]  # [n, t, j]
    gttj = np.where(eye[None], 0.0, gttj)
    A = np.einsum("nsj,ntj->nst", F, gttj)
    # A'_rst = sum_{k != t} F_rk F_sk g(t, k, k)
    gtkk = G[:, :, np.arange(d), np.arange(d)]  # [n, t, k] = g(t, k, k)
    gtkk = np.where(eye[None], 0.0, gtkk)
    Aprime = np.einsum("nrk,nsk,ntk->nrst", F, F, gtkk)
    distinct = ~(eye[:, :, None] | eye[:, None, :] | eye[None, :, :])  # [i, t, j]
    Dstar = np.where(distinct[None], G, 0.0)
    # A''_{r s t} = sum_{ij} F_ri Dstar[i, t, j] F_sj
    Adoubleprime = np.einsum("nri,nitj,nsj->nrst", F, Dstar, F, optimize=True)
    Fdiag = np.einsum("nrt,nst->nrst", F, F)
    Dtt = ws.Delta[:, np.arange(d), np.arange(d)]
    K = (Fdiag * (0.5 * Dtt)[:, None, None, :]
         + F[:, :, None, :] * A[:, None, :, :]
         + F[:, None, :, :] * A[:, :, None, :]
         + Aprime + Adoubleprime)
    return KTables(A, Aprime, Adoubleprime, K, Dstar)


def k_direct(ws: EigenWorkspace) -> np.ndarray:
    """``K`` straight from the full second-difference tensor (reference path)."""
    G = second_table(ws.gamma)
    return np.einsum("nri,nitj,nsj->nrst", ws.F, G, ws.F, optimize=True)


# --------------------------------------------------------------------------- per-row API


def _as_rows(layout: ThetaLayout, eta, y=None):
    eta = np.asarray(eta, dtype=float)
    single = eta.ndim == 1
    eta2 = np.atleast_2d(eta)
    if eta2.ndim != 2 or eta2.shape[1] != layout.q:
        raise ShapeError(f"expected eta rows of length {layout.q}, got shape {eta.shape}")
    if not np.all(np.isfinite(eta2)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(eta2), axis=1))[0])
        raise DataError(f"non-finite linear predictor in row {bad}")
    y2 = None
    if y is not None:
        y2 = np.atleast_2d(np.asarray(y, dtype=float))
        if y2.shape != (eta2.shape[0], layout.d):
            raise ShapeError(f"expected responses of shape {(eta2.shape[0], layout.d)}, got {np.shape(y)}")
        if not np.all(np.isfinite(y2)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(y2), axis=1))[0])
            raise DataError(f"non-finite response in row {bad}")
    return eta2, y2, single


def workspace_from_eta(layout: ThetaLayout, eta, y, row_offset: int = 0) -> EigenWorkspace:
    eta2, y2, _ = _as_rows(layout, eta, y)
    theta = theta_from_eta(layout, eta2)
    return logm_eigen(theta, y2 - eta2[:, :layout.d], row_offset=row_offset)


def logm_loglik_ws(ws: EigenWorkspace) -> np.ndarray:
    return -0.5 * (ws.gamma.sum(axis=1) + np.sum(ws.L * ws.s ** 2, axis=1))


def logm_loglik(layout: ThetaLayout, eta, y):
    """Log-likelihood without the ``-d/2 log(2 pi)`` constant."""
    ws = workspace_from_eta(layout, eta, y)
    ll = logm_loglik_ws(ws)
    return float(ll[0]) if np.ndim(eta) == 1 else ll


def logm_grad_ws(ws: EigenWorkspace, layout: ThetaLayout) -> np.ndarray:
    d = layout.d
    g = np.empty((ws.n, layout.q))
    g[:, :d] = np.einsum("njk,nk->nj", ws.U, ws.L * ws.s)
    idx = np.arange(d)
    g[:, d:2 * d] = 0.5 * ws.Xi[:, idx, idx] - 0.5
    g[:, 2 * d:] = ws.Xi[:, layout.cols0, layout.rows0]
    return g


def logm_grad(layout: ThetaLayout, eta, y):
    ws = workspace_from_eta(layout, eta, y)
    g = logm_grad_ws(ws, layout)
    return g[0] if np.ndim(eta) == 1 else g


@lru_cache(maxsize=64)
def dense_pairs(q: int) -> np.ndarray:
    """Upper-triangle ``(j, k)`` pairs, ``j <= k``, in lexicographic order."""
    r, c = np.triu_indices(q)
    return np.column_stack([r, c]).astype(np.intp)


@lru_cache(maxsize=64)
def _entry_tables(d: int):
    """For every covariance predictor the two matrix entries it occupies.

    Returns flattened ``x*d + y`` positions of the first entry, the second
    entry (same as the first for diagonal predictors) and a weight that is
    zero for diagonal predictors so the second entry is not double counted.
    """
    from .layout import build_theta_layout
    lay = build_theta_layout(d)
    first = np.concatenate([lay.diag0 - d, lay.cols0]) * d + np.concatenate([lay.diag0 - d, lay.rows0])
    second = np.concatenate([lay.diag0 - d, lay.rows0]) * d + np.concatenate([lay.diag0 - d, lay.cols0])
    weight = np.concatenate([np.zeros(d), np.ones(lay.n_offdiag)])
    return first, second, weight


def _hess_dense(ws: EigenWorkspace, kt: KTables, layout: ThetaLayout) -> np.ndarray:
    n, d, q = ws.n, ws.d, layout.q
    H = np.empty((n, q, q))
    U = ws.U
    # mean-mean
    H[:, :d, :d] = -np.einsum("nlj,nj,nmj->nlm", U, ws.L, U)
    # mean-diagonal: -sum_j U_lj Pi_pj U_pj
    Pi = ws.Pi
    md = -np.einsum("nlj,npj,npj->nlp", U, Pi, U)
    H[:, :d, d:2 * d] = md
    # mean-offdiagonal: -sum_j U_lj (Pi_zj U_wj + Pi_wj U_zj)
    z, w = layout.cols0, layout.rows0
    if len(z):
        V = Pi[:, z, :] * U[:, w, :] + Pi[:, w, :] * U[:, z, :]  # (n, m, j)
        H[:, :d, 2 * d:] = -np.einsum("nlj,nmj->nlm", U, V)
    # covariance-covariance via N[x, y, X, Y] = sum_t K[x, X, t] U[y, t] U[Y, t]
    K = kt.K
    N = np.einsum("nxXt,nyt,nYt->nxyXY", K, U, U, optimize=True).reshape(n, d * d, d * d)
    first, second, weight = _entry_tables(d)
    M11 = N[:, first[:, None], first[None, :]]
    M21 = N[:, second[:, None], first[None, :]]
    M12 = N[:, first[:, None], second[None, :]]
    M22 = N[:, second[:, None], second[None, :]]
    cc = -(M11 + weight[:, None] * M21 + weight[None, :] * M12 + weight[:, None] * weight[None, :] * M22)
    H[:, d:, d:] = cc
    H[:, d:, :d] = np.swapaxes(H[:, :d, d:], 1, 2)
    return H


def logm_hess_ws(ws: EigenWorkspace, kt: KTables, layout: ThetaLayout) -> np.ndarray:
    """Hessian values aligned with :func:`dense_pairs` (upper triangle)."""
    H = _hess_dense(ws, kt, layout)
    pr = dense_pairs(layout.q)
    return H[:, pr[:, 0], pr[:, 1]]


def logm_hess(layout: ThetaLayout, eta, y):
    ws = workspace_from_eta(layout, eta, y)
    kt = build_ktables(ws)
    h = logm_hess_ws(ws, kt, layout)
    return h[0] if np.ndim(eta) == 1 else h


def logm_hess_dense(layout: ThetaLayout, eta, y):
    ws = workspace_from_eta(layout, eta, y)
    H = _hess_dense(ws, build_ktables(ws), layout)
    return H[0] if np.ndim(eta) == 1 else H


def logm_derivs(layout: ThetaLayout, eta, y, order: int = 2, row_offset: int = 0, chunk_bytes: int = 64 << 20):
    """``(loglik, grad, hess)`` for a stack of rows, processed in sub-batches.

    Sub-batches keep the ``O(d^4)`` per-row temporaries under ``chunk_bytes``.
    """
    if order >= 3:
        from .exceptions import UnsupportedOperationError
        raise UnsupportedOperationError("third derivatives are not available for the logM parametrisation")
    eta2, y2, single = _as_rows(layout, eta, y)
    n, d, q = eta2.shape[0], layout.d, layout.q
    per_row = 8 * (6 * d ** 4 + 2 * q * q + 4 * d ** 3)
    step = max(1, min(n, chunk_bytes // per_row))
    ll = np.empty(n)
    g = np.empty((n, q)) if order >= 1 else None
    h = np.empty((n, q * (q + 1) // 2)) if order >= 2 else None
    pr = dense_pairs(q)
    for a in range(0, n, step):
        b = min(n, a + step)
        theta = theta_from_eta(layout, eta2[a:b])
        ws = logm_eigen(theta, y2[a:b] - eta2[a:b, :d], row_offset=row_offset + a)
        ll[a:b] = logm_loglik_ws(ws)
        if order >= 1:
            g[a:b] = logm_grad_ws(ws, layout)
        if order >= 2:
            H = _hess_dense(ws, build_ktables(ws), layout)
            h[a:b] = H[:, pr[:, 0], pr[:, 1]]
    if single:
        return float(ll[0]), None if g is None else g[0], None if h is None else h[0], None
    return ll, g, h, None


def logm_sigma(layout: ThetaLayout, eta) -> np.ndarray:
    """``Sigma = U exp(Gamma) U'``."""
    eta2, _, single = _as_rows(layout, eta)
    theta = theta_from_eta(layout, eta2)
    gamma, U = _eigh(theta)
    if np.any(np.abs(gamma) > EXP_LIMIT):
        raise ParameterRangeError(f"eigenvalue of the parametrisation matrix beyond +-{EXP_LIMIT:g}")
    S = np.einsum("nij,nj,nkj->nik", U, np.exp(gamma), U)
    S = 0.5 * (S + np.swapaxes(S, -1, -2))
    return S[0] if single else S


def logm_theta_from_sigma(Sigma) -> np.ndarray:
    """Matrix logarithm of an SPD matrix (or stack) through the same eigensolver."""
    Sigma = np.asarray(Sigma, dtype=float)
    lam, V = np.linalg.eigh(Sigma)
    if np.any(lam <= 0):
        raise NumericError("matrix is not positive definite")
    return np.einsum("...ij,...j,...kj->...ik", V, np.log(lam), V)
