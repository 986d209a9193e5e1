"""Penalized B-spline and linear bases for single covariates."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline
from scipy.linalg import qr

from .exceptions import ConfigurationError, DataError, InsufficientDataError

RANK_TOL = 1e-10
KINDS = ("bspline", "linear")


@dataclass(frozen=True)
class SmoothTerm:
    """Specification of one effect of one covariate.

    ``kind`` is ``"bspline"`` (cubic B-splines with a second-order difference
    penalty) or ``"linear"`` (unpenalized slope).
    """

    covariate: str
    k: int = 10
    kind: str = "bspline"
    center: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown basis kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "bspline" and self.k < 3:
            raise ConfigurationError(f"spline basis dimension must be >= 3, got {self.k}")

    def to_dict(self) -> dict:
        return {"covariate": self.covariate, "k": self.k, "kind": self.kind, "center": self.center}


def difference_penalty(k: int, order: int = 2) -> np.ndarray:
    D = np.diff(np.eye(k), n=order, axis=0)
    return D.T @ D


def penalty_rank(S: np.ndarray, tol: float = RANK_TOL) -> int:
    if S.size == 0:
        return 0
    ev = np.linalg.eigvalsh(S)
    top = ev.max()
    if top <= 0:
        return 0
    return int(np.sum(ev > tol * top))


@dataclass(frozen=True, eq=False)
class SmoothBasis:
    """A basis fitted to training data, able to re-evaluate on new covariate values."""

    term: SmoothTerm
    lower: float
    upper: float
    knots: np.ndarray | None
    degree: int
    constraint: np.ndarray | None  # k x (k-1) null-space basis of the centering constraint
    shift: float = 0.0

    @property
    def n_columns(self) -> int:
        if self.term.kind == "linear":
            return 1
        k = self.term.k
        return k - 1 if self.constraint is not None else k

    def raw_design(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.term.kind == "linear":
            return (x - self.shift)[:, None]
        xs = np.clip(x, self.lower, self.upper)
        B = BSpline.design_matrix(xs, self.knots, self.degree).toarray()
        outside = (x < self.lower) | (x > self.upper)
        if outside.any():
            # beyond the training range the basis is continued linearly
            B[outside] = BSpline.design_matrix(x[outside], self.knots, self.degree, extrapolate=True).toarray()
        return B

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        B = self.raw_design(x)
        if self.constraint is not None:
            B = B @ self.constraint
        return B

    def penalty(self) -> np.ndarray:
        if self.term.kind == "linear":
            return np.zeros((1, 1))
        S = difference_penalty(self.term.k)
        if self.constraint is not None:
            S = self.constraint.T @ S @ self.constraint
        return 0.5 * (S + S.T)

    def out_of_range(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return (x < self.lower) | (x > self.upper)

    def to_dict(self) -> dict:
        return {
            "term": self.term.to_dict(),
            "lower": self.lower,
            "upper": self.upper,
            "knots": None if self.knots is None else self.knots.tolist(),
            "degree": self.degree,
            "constraint": None if self.constraint is None else self.constraint.tolist(),
            "shift": self.shift,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SmoothBasis":
        return cls(
            term=SmoothTerm(**data["term"]),
            lower=data["lower"],
            upper=data["upper"],
            knots=None if data["knots"] is None else np.asarray(data["knots"], dtype=float),
            degree=data["degree"],
            constraint=None if data["constraint"] is None else np.asarray(data["constraint"], dtype=float),
            shift=data["shift"],
        )


def _check_covariate(x: np.ndarray, term: SmoothTerm) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise DataError(f"covariate {term.covariate!r} must be one-dimensional")
    if not np.all(np.isfinite(x)):
        raise DataError(f"covariate {term.covariate!r} contains non-finite values")
    return x


def fit_basis(x: np.ndarray, term: SmoothTerm) -> SmoothBasis:
    x = _check_covariate(x, term)
    n = x.shape[0]
    lo, hi = float(x.min()), float(x.max())
    if hi - lo <= 0:
        raise DataError(f"covariate {term.covariate!r} is constant; design would be rank deficient")
    if term.kind == "linear":
        shift = float(x.mean()) if term.center else 0.0
        return SmoothBasis(term, lo, hi, None, 1, None, shift)

    k = term.k
    if n < k:
        raise InsufficientDataError(f"basis dimension {k} exceeds the {n} available rows")
    degree = min(3, k - 1)
    nseg = k - degree
    step = (hi - lo) / nseg
    knots = lo + step * np.arange(-degree, nseg + degree + 1)
    knots[degree] = lo
    knots[nseg + degree] = hi
    B = BSpline.design_matrix(x, knots, degree).toarray()
    constraint = None
    if term.center:
        colsum = B.sum(axis=0)[:, None]
        Q, _ = qr(colsum, mode="full")
        constraint = Q[:, 1:]
    basis = SmoothBasis(term, lo, hi, knots, degree, constraint)
    X = B @ constraint if constraint is not None else B
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise DataError(f"design for covariate {term.covariate!r} is rank deficient "
                        f"(too few distinct values for k={k})")
    return basis


def build_smooth_basis(x: np.ndarray, term: SmoothTerm) -> tuple[np.ndarray, np.ndarray, int]:
    """Design matrix, penalty matrix and penalty rank of one term."""
    basis = fit_basis(x, term)
    S = basis.penalty()
    return basis.evaluate(x), S, penalty_rank(S)
