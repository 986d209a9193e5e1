"""Modified Cholesky (MCD) kernel.

``Sigma^{-1} = T' D^{-2} T`` with ``T`` unit lower triangular, ``T[w, z] =
eta_{2d+m}`` for off-diagonal slot ``m`` and ``log D^2 = diag(eta_{d+1..2d})``.
With ``r = y - mu`` and ``u = T r`` the log-likelihood (without the
``-d/2 log 2 pi`` constant) is ``-1/2 sum_j (delta_j + exp(-delta_j) u_j^2)``.

All functions accept a single row (``eta`` of shape ``(q,)``) or a stack of
rows (``(n, q)``); derivatives with respect to ``eta`` are returned only for
the structurally non-zero entries listed by :func:`mcd_sparsity`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .exceptions import DataError, ParameterRangeError, ShapeError
from .layout import ThetaLayout, build_theta_layout

EXP_LIMIT = 700.0

# block labels: 0 = mean, 1 = log D^2 diagonal, 2 = T entries
_H_CASES = ("mm", "md", "mt", "dd", "dt", "tt")
_T_CASES = ("mmd", "mmt", "mdd", "mdt", "mtt", "ddd", "ddt", "dtt")


# --------------------------------------------------------------------------- sparsity


def hess_nonzero_count(d: int) -> int:
    return d * ((d * d + 15 * d + 2) + 2 * (d - 1) * (d - 2) * (d > 2)) // 6


def hess_total_count(d: int) -> int:
    return d * (d + 1) * (d + 2) * (d + 3) // 8


def third_nonzero_count(d: int) -> int:
    return d * (4 * d * d + 3 * d + 2) // 3


def third_total_count(d: int) -> int:
    return d * (d + 3) * (d ** 4 + 6 * d ** 3 + 15 * d ** 2 + 18 * d + 8) // 48


@dataclass(frozen=True, eq=False)
class McdSparsity:
    """Structurally non-zero Hessian pairs and third-derivative triples.

    ``hess_pairs`` is an ``(P, 2)`` array of 0-based predictor indices with
    ``j <= k`` in lexicographic order; ``third_triples`` is ``(T, 3)`` with
    ``k <= l <= m``.  ``hess_case`` / ``third_case`` hold the formula case of
    each entry together with the index arguments used to evaluate it.
    """

    d: int
    hess_pairs: np.ndarray
    third_triples: np.ndarray
    hess_blocks: dict = field(repr=False)
    third_blocks: dict = field(repr=False)
    _hess_eval: dict = field(repr=False)
    _third_eval: dict = field(repr=False)

    @property
    def n_pairs(self) -> int:
        return len(self.hess_pairs)

    @property
    def n_triples(self) -> int:
        return len(self.third_triples)

    def pair_index(self) -> dict:
        return {(int(a), int(b)): i for i, (a, b) in enumerate(self.hess_pairs)}


def _block_of(layout: ThetaLayout, idx: int) -> int:
    return 0 if idx < layout.d else (1 if idx < 2 * layout.d else 2)


def _block_totals(d: int) -> tuple[dict, dict]:
    size = (d, d, d * (d - 1) // 2)

    def multiset(n, k):
        # number of non-redundant entries in a symmetric block on identical index sets
        from math import comb
        return comb(n + k - 1, k)

    htot = {}
    for a in range(3):
        for b in range(a, 3):
            htot[(a + 1, b + 1)] = multiset(size[a], 2) if a == b else size[a] * size[b]
    ttot = {}
    for a in range(3):
        for b in range(a, 3):
            for c in range(b, 3):
                key = (a + 1, b + 1, c + 1)
                groups = {}
                for blk in (a, b, c):
                    groups[blk] = groups.get(blk, 0) + 1
                tot = 1
                for blk, mult in groups.items():
                    tot *= multiset(size[blk], mult)
                ttot[key] = tot
    return htot, ttot


@lru_cache(maxsize=64)
def mcd_sparsity(d: int) -> McdSparsity:
    """Enumerate the MCD derivative patterns case by case."""
    layout = build_theta_layout(d)
    D = d
    rows, cols = layout.rows0, layout.cols0
    off = layout.offdiag0
    slots_in_row = [np.flatnonzero(rows == w) for w in range(d)]

    hess = []  # (a, b, case, i1, i2, i3)
    for l in range(d):
        for m in range(l, d):
            hess.append((l, m, "mm", l, m, 0))
    for l in range(d):
        for j in range(l, d):
            hess.append((l, D + j, "md", l, j, 0))
    for l in range(d):
        for s in range(len(off)):
            if l <= rows[s]:
                hess.append((l, int(off[s]), "mt", l, s, 0))
    for j in range(d):
        hess.append((D + j, D + j, "dd", j, 0, 0))
        for s in slots_in_row[j]:
            hess.append((D + j, int(off[s]), "dt", j, int(s), 0))
    for w in range(d):
        sl = slots_in_row[w]
        for i, s in enumerate(sl):
            for s2 in sl[i:]:
                hess.append((int(off[s]), int(off[s2]), "tt", int(s), int(s2), 0))

    third = []  # (a, b, c, case, i1, i2, i3)
    for j in range(d):
        for l in range(j + 1):
            for m in range(l, j + 1):
                third.append((l, m, D + j, "mmd", l, m, j))
    for s in range(len(off)):
        w, z = int(rows[s]), int(cols[s])
        for l in range(d):
            for m in range(l, d):
                if (l == z and m <= w) or (m == z and l <= w):
                    third.append((l, m, int(off[s]), "mmt", l, m, s))
    for j in range(d):
        for l in range(j + 1):
            third.append((l, D + j, D + j, "mdd", l, j, 0))
            for s in slots_in_row[j]:
                third.append((l, D + j, int(off[s]), "mdt", l, j, int(s)))
    for w in range(d):
        sl = slots_in_row[w]
        for i, s in enumerate(sl):
            for s2 in sl[i:]:
                for l in sorted({int(cols[s]), int(cols[s2])}):
                    third.append((l, int(off[s]), int(off[s2]), "mtt", l, int(s), int(s2)))
    for j in range(d):
        third.append((D + j, D + j, D + j, "ddd", j, 0, 0))
        sl = slots_in_row[j]
        for i, s in enumerate(sl):
            third.append((D + j, D + j, int(off[s]), "ddt", j, int(s), 0))
            for s2 in sl[i:]:
                third.append((D + j, int(off[s]), int(off[s2]), "dtt", j, int(s), int(s2)))

    hess.sort(key=lambda t: (t[0], t[1]))
    third.sort(key=lambda t: (t[0], t[1], t[2]))
    hess_pairs = np.array([h[:2] for h in hess], dtype=np.intp).reshape(-1, 2)
    third_triples = np.array([t[:3] for t in third], dtype=np.intp).reshape(-1, 3)

    def group(entries, cases, nidx, start):
        out = {}
        for c in cases:
            pos = [i for i, e in enumerate(entries) if e[start] == c]
            args = np.array([entries[i][start + 1:start + 1 + nidx] for i in pos], dtype=np.intp).reshape(-1, nidx)
            out[c] = (np.array(pos, dtype=np.intp), args)
        return out

    htot, ttot = _block_totals(d)
    hblocks = {k: [0, v] for k, v in htot.items()}
    for a, b in hess_pairs:
        hblocks[(_block_of(layout, a) + 1, _block_of(layout, b) + 1)][0] += 1
    tblocks = {k: [0, v] for k, v in ttot.items()}
    for a, b, c in third_triples:
        tblocks[(_block_of(layout, a) + 1, _block_of(layout, b) + 1, _block_of(layout, c) + 1)][0] += 1

    return McdSparsity(
        d=d,
        hess_pairs=hess_pairs,
        third_triples=third_triples,
        hess_blocks={k: tuple(v) for k, v in hblocks.items()},
        third_blocks={k: tuple(v) for k, v in tblocks.items()},
        _hess_eval=group(hess, _H_CASES, 3, 2),
        _third_eval=group(third, _T_CASES, 3, 3),
    )


# --------------------------------------------------------------------------- kernels


@dataclass
class McdWork:
    """Per-row quantities shared by every derivative order (all batched over rows)."""

    T: np.ndarray   # (n, d, d) unit lower triangular
    r: np.ndarray   # (n, d) residuals
    u: np.ndarray   # (n, d) = T r
    ed: np.ndarray  # (n, d) = exp(-delta)


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
        y = np.asarray(y, dtype=float)
        y2 = np.atleast_2d(y)
        if y2.shape != (eta2.shape[0], layout.d):
            raise ShapeError(f"expected responses of shape {(eta2.shape[0], layout.d)}, got {y.shape}")
        if not np.all(np.isfinite(y2)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(y2), axis=1))[0])
            raise DataError(f"non-finite response in row {bad}")
    return eta2, y2, single


def _check_range(delta: np.ndarray):
    big = np.abs(delta) > EXP_LIMIT
    if big.any():
        row = int(np.flatnonzero(big.any(axis=-1))[0])
        raise ParameterRangeError(f"log-variance predictor beyond +-{EXP_LIMIT:g} in row {row}")


def _tmat(layout: ThetaLayout, eta2: np.ndarray) -> np.ndarray:
    n, d = eta2.shape[0], layout.d
    T = np.zeros((n, d, d))
    idx = np.arange(d)
    T[:, idx, idx] = 1.0
    T[:, layout.rows0, layout.cols0] = eta2[:, layout.offdiag0]
    return T


def mcd_work(layout: ThetaLayout, eta, y) -> McdWork:
    eta2, y2, _ = _as_rows(layout, eta, y)
    return _work(layout, eta2, y2)


def _work(layout, eta2, y2):
    d = layout.d
    delta = eta2[:, d:2 * d]
    _check_range(delta)
    T = _tmat(layout, eta2)
    r = y2 - eta2[:, :d]
    u = np.einsum("njk,nk->nj", T, r)
    return McdWork(T, r, u, np.exp(-delta))


def _out(x, single):
    return x[0] if single else x


def mcd_loglik(layout: ThetaLayout, eta, y):
    """Log-likelihood without the ``-d/2 log(2 pi)`` constant."""
    eta2, y2, single = _as_rows(layout, eta, y)
    wk = _work(layout, eta2, y2)
    ll = -0.5 * (eta2[:, layout.d:2 * layout.d].sum(axis=1) + np.sum(wk.ed * wk.u ** 2, axis=1))
    return float(ll[0]) if single else ll


def mcd_sigma(layout: ThetaLayout, eta) -> np.ndarray:
    """Covariance matrix ``(T' D^{-2} T)^{-1} = T^{-1} D^2 T^{-T}``."""
    eta2, _, single = _as_rows(layout, eta)
    d = layout.d
    delta = eta2[:, d:2 * d]
    _check_range(delta)
    T = _tmat(layout, eta2)
    eye = np.broadcast_to(np.eye(d), T.shape)
    Tinv = np.linalg.solve(T, eye)
    S = np.einsum("nij,nj,nkj->nik", Tinv, np.exp(delta), Tinv)
    S = 0.5 * (S + np.swapaxes(S, -1, -2))
    return _out(S, single)


def mcd_precision(layout: ThetaLayout, eta) -> np.ndarray:
    eta2, _, single = _as_rows(layout, eta)
    d = layout.d
    delta = eta2[:, d:2 * d]
    _check_range(delta)
    T = _tmat(layout, eta2)
    P = np.einsum("nji,nj,njk->nik", T, np.exp(-delta), T)
    return _out(P, single)


def _grad(layout, wk):
    d = layout.d
    n = wk.r.shape[0]
    g = np.empty((n, layout.q))
    edu = wk.ed * wk.u
    g[:, :d] = np.einsum("njl,nj->nl", wk.T, edu)
    g[:, d:2 * d] = 0.5 * edu * wk.u - 0.5
    g[:, 2 * d:] = -edu[:, layout.rows0] * wk.r[:, layout.cols0]
    return g


def mcd_grad(layout: ThetaLayout, eta, y):
    eta2, y2, single = _as_rows(layout, eta, y)
    return _out(_grad(layout, _work(layout, eta2, y2)), single)


def _hess(layout, wk, sp):
    T, r, u, ed = wk.T, wk.r, wk.u, wk.ed
    rows, cols = layout.rows0, layout.cols0
    n = r.shape[0]
    out = np.empty((n, sp.n_pairs))
    ev = sp._hess_eval

    pos, a = ev["mm"]
    if len(pos):
        M = np.einsum("nji,nj,njk->nik", T, ed, T)
        out[:, pos] = -M[:, a[:, 0], a[:, 1]]
    pos, a = ev["md"]
    if len(pos):
        l, j = a[:, 0], a[:, 1]
        out[:, pos] = -(ed * u)[:, j] * T[:, j, l]
    pos, a = ev["mt"]
    if len(pos):
        l, s = a[:, 0], a[:, 1]
        w, z = rows[s], cols[s]
        out[:, pos] = ed[:, w] * (T[:, w, l] * r[:, z] + u[:, w] * (l == z))
    pos, a = ev["dd"]
    if len(pos):
        j = a[:, 0]
        out[:, pos] = -0.5 * (ed * u * u)[:, j]
    pos, a = ev["dt"]
    if len(pos):
        j, s = a[:, 0], a[:, 1]
        out[:, pos] = (ed * u)[:, j] * r[:, cols[s]]
    pos, a = ev["tt"]
    if len(pos):
        s, s2 = a[:, 0], a[:, 1]
        out[:, pos] = -ed[:, rows[s]] * r[:, cols[s]] * r[:, cols[s2]]
    return out


def mcd_hess(layout: ThetaLayout, eta, y, sparsity: McdSparsity | None = None):
    """Hessian values aligned with ``sparsity.hess_pairs``."""
    sp = sparsity or mcd_sparsity(layout.d)
    eta2, y2, single = _as_rows(layout, eta, y)
    return _out(_hess(layout, _work(layout, eta2, y2), sp), single)


def _third(layout, wk, sp):
    T, r, u, ed = wk.T, wk.r, wk.u, wk.ed
    rows, cols = layout.rows0, layout.cols0
    n = r.shape[0]
    out = np.empty((n, sp.n_triples))
    ev = sp._third_eval

    pos, a = ev["mmd"]
    if len(pos):
        l, m, j = a.T
        out[:, pos] = ed[:, j] * T[:, j, l] * T[:, j, m]
    pos, a = ev["mmt"]
    if len(pos):
        l, m, s = a.T
        w, z = rows[s], cols[s]
        out[:, pos] = -ed[:, w] * ((l == z) * T[:, w, m] + (m == z) * T[:, w, l])
    pos, a = ev["mdd"]
    if len(pos):
        l, j = a[:, 0], a[:, 1]
        out[:, pos] = (ed * u)[:, j] * T[:, j, l]
    pos, a = ev["mdt"]
    if len(pos):
        l, j, s = a.T
        z = cols[s]
        out[:, pos] = -ed[:, j] * (T[:, j, l] * r[:, z] + u[:, j] * (l == z))
    pos, a = ev["mtt"]
    if len(pos):
        l, s, s2 = a.T
        z, z2 = cols[s], cols[s2]
        out[:, pos] = ed[:, rows[s]] * ((l == z) * r[:, z2] + (l == z2) * r[:, z])
    pos, a = ev["ddd"]
    if len(pos):
        j = a[:, 0]
        out[:, pos] = 0.5 * (ed * u * u)[:, j]
    pos, a = ev["ddt"]
    if len(pos):
        j, s = a[:, 0], a[:, 1]
        out[:, pos] = -(ed * u)[:, j] * r[:, cols[s]]
    pos, a = ev["dtt"]
    if len(pos):
        j, s, s2 = a.T
        out[:, pos] = ed[:, j] * r[:, cols[s]] * r[:, cols[s2]]
    return out


def mcd_third(layout: ThetaLayout, eta, y, sparsity: McdSparsity | None = None):
    """Third derivatives aligned with ``sparsity.third_triples``."""
    sp = sparsity or mcd_sparsity(layout.d)
    eta2, y2, single = _as_rows(layout, eta, y)
    return _out(_third(layout, _work(layout, eta2, y2), sp), single)


def mcd_derivs(layout: ThetaLayout, eta, y, order: int = 2, sparsity: McdSparsity | None = None):
    """``(loglik, grad, hess, third)`` sharing one workspace; unused orders are ``None``."""
    sp = sparsity or mcd_sparsity(layout.d)
    eta2, y2, single = _as_rows(layout, eta, y)
    wk = _work(layout, eta2, y2)
    d = layout.d
    ll = -0.5 * (eta2[:, d:2 * d].sum(axis=1) + np.sum(wk.ed * wk.u ** 2, axis=1))
    g = _grad(layout, wk) if order >= 1 else None
    h = _hess(layout, wk, sp) if order >= 2 else None
    t = _third(layout, wk, sp) if order >= 3 else None
    if single:
        return float(ll[0]), g[0] if g is not None else None, h[0] if h is not None else None, \
            t[0] if t is not None else None
    return ll, g, h, t


def dense_hessian(pairs: np.ndarray, values: np.ndarray, q: int) -> np.ndarray:
    """Scatter packed pair values into dense symmetric ``(..., q, q)`` matrices."""
    values = np.asarray(values)
    H = np.zeros(values.shape[:-1] + (q, q))
    H[..., pairs[:, 0], pairs[:, 1]] = values
    H[..., pairs[:, 1], pairs[:, 0]] = values
    return H


def dense_third(triples: np.ndarray, values: np.ndarray, q: int) -> np.ndarray:
    values = np.asarray(values)
    A = np.zeros(values.shape[:-1] + (q, q, q))
    a, b, c = triples.T
    for i, j, k in ((a, b, c), (a, c, b), (b, a, c), (b, c, a), (c, a, b), (c, b, a)):
        A[..., i, j, k] = values
    return A
