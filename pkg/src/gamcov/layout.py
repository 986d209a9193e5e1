"""Index bookkeeping between linear predictors and the parametrisation matrix.

Linear predictors are numbered ``1..q`` in the mathematical description, with
``q = d + d(d+1)/2``: the first ``d`` control the mean, the next ``d`` the
diagonal of the symmetric parametrisation matrix ``Theta`` and the remaining
``d(d-1)/2`` its strictly lower triangle, in row-wise half-vectorised order.
The public fields ``z``, ``w`` and ``G`` keep that 1-based convention; the
``*0`` helpers give the 0-based positions used by the numerical kernels.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .exceptions import InvalidDimensionError, ShapeError


def n_predictors(d: int) -> int:
    return d + d * (d + 1) // 2


def rvech(mat: np.ndarray) -> np.ndarray:
    """Row-wise half-vectorisation of the lower triangle (diagonal included).

    Works on a single square matrix or on a stack with leading batch axes.
    """
    mat = np.asarray(mat)
    d = mat.shape[-1]
    rows, cols = np.tril_indices(d)
    return mat[..., rows, cols]


def unrvech(vec: np.ndarray, d: int) -> np.ndarray:
    """Inverse of :func:`rvech` producing symmetric matrices."""
    vec = np.asarray(vec, dtype=float)
    rows, cols = np.tril_indices(d)
    out = np.zeros(vec.shape[:-1] + (d, d))
    out[..., rows, cols] = vec
    out[..., cols, rows] = vec
    return out


@dataclass(frozen=True, eq=False)
class ThetaLayout:
    """Map between predictor indices and entries of ``Theta``.

    Attributes
    ----------
    d : int
        Response dimension.
    q : int
        Number of linear predictors.
    z, w : ndarray of int, shape (d(d-1)/2,)
        Column and row (1-based) of each strictly-lower slot of ``Theta``.
    G : ndarray of int, shape (d-1, d-1)
        ``G[j-1, k-1]`` is the (1-based) predictor index stored at
        ``Theta[j, k-1]`` (0-based row ``j``), zero above the diagonal.
    """

    d: int
    q: int
    z: np.ndarray = field(repr=False)
    w: np.ndarray = field(repr=False)
    G: np.ndarray = field(repr=False)

    @property
    def n_offdiag(self) -> int:
        return self.d * (self.d - 1) // 2

    @cached_property
    def diag0(self) -> np.ndarray:
        """0-based predictor index of each diagonal entry of ``Theta``."""
        return np.arange(self.d, 2 * self.d)

    @cached_property
    def rows0(self) -> np.ndarray:
        """0-based row of each off-diagonal slot (the larger index)."""
        return self.w - 1

    @cached_property
    def cols0(self) -> np.ndarray:
        return self.z - 1

    @cached_property
    def offdiag0(self) -> np.ndarray:
        return np.arange(2 * self.d, self.q)

    @cached_property
    def slot_of_entry(self) -> np.ndarray:
        """``(d, d)`` array giving the 0-based predictor index of ``Theta[a, b]``."""
        out = np.empty((self.d, self.d), dtype=np.intp)
        out[np.arange(self.d), np.arange(self.d)] = self.diag0
        out[self.rows0, self.cols0] = self.offdiag0
        out[self.cols0, self.rows0] = self.offdiag0
        return out

    def theta_entry(self, index0: int) -> tuple[int, int]:
        """``(row, col)`` of ``Theta`` (0-based, row >= col) for predictor ``index0``."""
        d = self.d
        if d <= index0 < 2 * d:
            return index0 - d, index0 - d
        if 2 * d <= index0 < self.q:
            m = index0 - 2 * d
            return int(self.rows0[m]), int(self.cols0[m])
        raise ValueError(f"predictor {index0} does not parametrise Theta")

    def kind(self, index0: int) -> str:
        if index0 < self.d:
            return "mean"
        if index0 < 2 * self.d:
            return "diag"
        return "offdiag"


def build_theta_layout(d: int) -> ThetaLayout:
    if int(d) != d or d < 1:
        raise InvalidDimensionError(f"response dimension must be an integer >= 1, got {d!r}")
    d = int(d)
    q = n_predictors(d)
    if d == 1:
        empty = np.zeros(0, dtype=np.intp)
        return ThetaLayout(d, q, empty, empty.copy(), np.zeros((0, 0), dtype=np.intp))
    j, k = np.meshgrid(np.arange(1, d), np.arange(1, d), indexing="ij")
    lower = k <= j
    Z = np.where(lower, k, 0)
    W = np.where(lower, j + 1, 0)
    G = np.where(lower, (j + 1) * j // 2 - (j - k) + 2 * d, 0).astype(np.intp)
    rows, cols = np.tril_indices(d - 1)
    z = Z[rows, cols].astype(np.intp)
    w = W[rows, cols].astype(np.intp)
    return ThetaLayout(d, q, z, w, G)


def theta_from_eta(layout: ThetaLayout, eta: np.ndarray) -> np.ndarray:
    """Symmetric ``Theta`` from one row ``(q,)`` or a stack ``(n, q)`` of predictors."""
    eta = np.asarray(eta, dtype=float)
    if eta.shape[-1] != layout.q:
        raise ShapeError(f"expected {layout.q} linear predictors, got {eta.shape[-1]}")
    d = layout.d
    theta = np.empty(eta.shape[:-1] + (d, d))
    idx = np.arange(d)
    theta[..., idx, idx] = eta[..., layout.diag0]
    off = eta[..., layout.offdiag0]
    theta[..., layout.rows0, layout.cols0] = off
    theta[..., layout.cols0, layout.rows0] = off
    return theta


def eta_from_theta(layout: ThetaLayout, theta: np.ndarray, mean: np.ndarray | None = None) -> np.ndarray:
    """Read the covariance slots back out of ``Theta`` (inverse of :func:`theta_from_eta`)."""
    theta = np.asarray(theta, dtype=float)
    d = layout.d
    eta = np.zeros(theta.shape[:-2] + (layout.q,))
    if mean is not None:
        eta[..., :d] = mean
    idx = np.arange(d)
    eta[..., layout.diag0] = theta[..., idx, idx]
    eta[..., layout.offdiag0] = theta[..., layout.rows0, layout.cols0]
    return eta
