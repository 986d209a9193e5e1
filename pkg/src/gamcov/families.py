"""Response families and the pull interface that feeds derivative blocks to the accumulator."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import logm, mcd
from .exceptions import ConfigurationError, DataError, NumericError, ShapeError, UnsupportedOperationError
from .layout import ThetaLayout, build_theta_layout
from .model import ModelSpec, eta_rows

LOG2PI = np.log(2 * np.pi)


@dataclass
class DerivBundle:
    """Derivatives of the log-likelihood w.r.t. eta for rows ``start:stop``.

    ``hess`` columns follow ``family.pairs``; ``third`` columns follow
    ``family.triples``.
    """

    start: int
    stop: int
    loglik: np.ndarray
    grad: np.ndarray | None
    hess: np.ndarray | None
    third: np.ndarray | None = None

    @property
    def nbytes(self) -> int:
        return sum(a.nbytes for a in (self.loglik, self.grad, self.hess, self.third) if a is not None)


class Family:
    """Common interface of the covariance parametrisations."""

    name = "base"
    supports_third = False

    def __init__(self, layout: ThetaLayout):
        self.layout = layout

    @property
    def d(self) -> int:
        return self.layout.d

    @property
    def q(self) -> int:
        return self.layout.q

    @property
    def pairs(self) -> np.ndarray:
        raise NotImplementedError

    @property
    def triples(self) -> np.ndarray:
        raise UnsupportedOperationError(f"third derivatives are not available for the {self.name} parametrisation")

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)

    def constant(self) -> float:
        """Per-row additive constant omitted by the kernels."""
        return -0.5 * self.d * LOG2PI

    def derivs(self, eta, y, order: int = 2, row_offset: int = 0):
        raise NotImplementedError

    def sigma(self, eta) -> np.ndarray:
        raise NotImplementedError

    def initial_eta(self, y: np.ndarray) -> np.ndarray:
        """Constant predictor values matching the marginal moments of ``y``.

        Means start at the column means, log-variances at the log of the
        marginal variances and all off-diagonal slots at zero.
        """
        y = np.asarray(y, float)
        eta0 = np.zeros(self.q)
        eta0[:self.d] = y.mean(axis=0)
        var = y.var(axis=0)
        eta0[self.d:2 * self.d] = np.log(np.where(var > 0, var, 1.0))
        return eta0


class McdFamily(Family):
    name = "mcd"
    supports_third = True

    def __init__(self, layout: ThetaLayout):
        super().__init__(layout)
        self.sparsity = mcd.mcd_sparsity(layout.d)

    @property
    def pairs(self) -> np.ndarray:
        return self.sparsity.hess_pairs

    @property
    def triples(self) -> np.ndarray:
        return self.sparsity.third_triples

    def derivs(self, eta, y, order: int = 2, row_offset: int = 0):
        try:
            return mcd.mcd_derivs(self.layout, eta, y, order, self.sparsity)
        except (DataError, NumericError, OverflowError) as err:
            raise type(err)(f"{err} (block starting at row {row_offset})") from None

    def sigma(self, eta) -> np.ndarray:
        return mcd.mcd_sigma(self.layout, eta)


class LogmFamily(Family):
    name = "logm"

    @property
    def pairs(self) -> np.ndarray:
        return logm.dense_pairs(self.q)

    def derivs(self, eta, y, order: int = 2, row_offset: int = 0):
        return logm.logm_derivs(self.layout, eta, y, order, row_offset=row_offset)

    def sigma(self, eta) -> np.ndarray:
        return logm.logm_sigma(self.layout, eta)


class FixedCovarianceFamily(Family):
    """Mean-only Gaussian model with a known covariance matrix.

    The log-likelihood is quadratic in the means, which makes it the reference
    case for Newton convergence and for exactness of the Laplace approximation.
    """

    name = "fixed"
    supports_third = True

    def __init__(self, Sigma):
        Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
        d = Sigma.shape[0]
        super().__init__(build_theta_layout(d))
        self.Sigma = Sigma
        try:
            c = np.linalg.cholesky(Sigma)
        except np.linalg.LinAlgError:
            raise NumericError("fixed covariance is not positive definite") from None
        self.precision = np.linalg.inv(Sigma)
        self.logdet = 2.0 * np.sum(np.log(np.diag(c)))
        r, k = np.triu_indices(d)
        self._pairs = np.column_stack([r, k]).astype(np.intp)

    @property
    def q(self) -> int:
        return self.d

    @property
    def pairs(self) -> np.ndarray:
        return self._pairs

    @property
    def triples(self) -> np.ndarray:
        return np.zeros((0, 3), dtype=np.intp)

    def derivs(self, eta, y, order: int = 2, row_offset: int = 0):
        eta2 = np.atleast_2d(np.asarray(eta, float))
        y2 = np.atleast_2d(np.asarray(y, float))
        if eta2.shape[1] != self.d or y2.shape != eta2.shape:
            raise ShapeError(f"expected rows of length {self.d}")
        r = y2 - eta2
        Pr = r @ self.precision
        ll = -0.5 * self.logdet - 0.5 * np.sum(r * Pr, axis=1)
        n = eta2.shape[0]
        g = Pr if order >= 1 else None
        h = None
        if order >= 2:
            h = np.broadcast_to(-self.precision[self._pairs[:, 0], self._pairs[:, 1]], (n, len(self._pairs))).copy()
        t = np.zeros((n, 0)) if order >= 3 else None
        return ll, g, h, t

    def sigma(self, eta) -> np.ndarray:
        eta2 = np.atleast_2d(np.asarray(eta, float))
        return np.broadcast_to(self.Sigma, (eta2.shape[0],) + self.Sigma.shape).copy()

    def initial_eta(self, y):
        return np.asarray(y, float).mean(axis=0)


def make_family(name: str, layout: ThetaLayout) -> Family:
    name = name.lower()
    if name == "mcd":
        return McdFamily(layout)
    if name == "logm":
        return LogmFamily(layout)
    raise ConfigurationError(f"unknown parametrisation {name!r}; expected 'mcd' or 'logm'")


class DerivSource:
    """Pulls derivative bundles for arbitrary row ranges.

    Linear predictors are formed on demand from ``beta`` (or read from a
    precomputed ``eta``), so nothing larger than the requested block is held.
    """

    def __init__(self, spec: ModelSpec, family: Family, y: np.ndarray, beta=None, eta=None):
        y = np.asarray(y, dtype=float)
        if y.shape != (spec.n, family.d):
            raise ShapeError(f"responses have shape {y.shape}, expected {(spec.n, family.d)}")
        if spec.q != family.q:
            raise ShapeError(f"spec has {spec.q} predictors but the family expects {family.q}")
        if (beta is None) == (eta is None):
            raise ValueError("give exactly one of beta or eta")
        self.spec = spec
        self.family = family
        self.y = y
        self.beta = None if beta is None else np.asarray(beta, float)
        self.eta = None if eta is None else np.asarray(eta, float)

    @property
    def n(self) -> int:
        return self.spec.n

    def eta_rows(self, start: int, stop: int) -> np.ndarray:
        if self.eta is not None:
            return self.eta[start:stop]
        return eta_rows(self.spec, self.beta, start, stop)

    def __call__(self, start: int, stop: int, order: int = 2) -> DerivBundle:
        eta = self.eta_rows(start, stop)
        ll, g, h, t = self.family.derivs(eta, self.y[start:stop], order, row_offset=start)
        return DerivBundle(start, stop, np.asarray(ll, float), g, h, t)
