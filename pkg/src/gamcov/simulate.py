"""Scenario generators for the smooth-effects and parsimonious designs.

Random streams come from a counter-based Philox generator.  Coefficients,
covariates and noise use separate child seeds so that, e.g., changing ``n``
leaves the drawn effect coefficients unchanged.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigurationError, InvalidDimensionError
from .layout import build_theta_layout, theta_from_eta
from .model import ModelSpec, PenaltyBlock

SCENARIOS = ("smooth", "parsimonious")

# U(lo, hi) ranges of m1..m13
M_RANGES = {
    1: (1.0, 3.0), 2: (1.0, 3.0), 3: (0.0, 0.5), 4: (9.0, 11.0), 5: (9.0, 11.0), 6: (9.0, 11.0),
    7: (-0.25, 0.25), 8: (-0.5, 0.5), 9: (-0.5, 0.5), 10: (-0.25, 0.25), 11: (-1.0, 1.0),
    12: (-1.0, 1.0), 13: (-0.5, 0.5),
}


@dataclass(frozen=True)
class ScenarioConfig:
    d: int
    n: int
    seed: int = 0
    kind: str = "smooth"
    parametrisation: str = "mcd"
    s: int = 2
    alpha: float | None = None

    def __post_init__(self):
        if self.kind not in SCENARIOS:
            raise ConfigurationError(f"unknown scenario {self.kind!r}; expected one of {SCENARIOS}")
        if self.parametrisation not in ("mcd", "logm"):
            raise ConfigurationError(f"unknown parametrisation {self.parametrisation!r}")
        if self.d < 2:
            raise InvalidDimensionError("covariance scenarios need d >= 2")
        if self.n < 1:
            raise ConfigurationError("n must be positive")
        if self.kind == "parsimonious" and self.alpha is None:
            if self.s not in (1, 2):
                raise ConfigurationError("parsimonious scenario index s must be 1 or 2")
            if self.s == 2 and self.d < 4:
                raise InvalidDimensionError("scenario s=2 needs d >= 4")


def _streams(seed: int, n_streams: int):
    ss = np.random.SeedSequence(seed)
    return [np.random.Generator(np.random.Philox(c)) for c in ss.spawn(n_streams)]


def draw_m(rng, q: int, d: int) -> dict:
    """Coefficients ``m_k`` of every predictor: means use ``m1..m6``, covariance slots ``m7..m13``."""
    m = {}
    for k in range(1, 7):
        lo, hi = M_RANGES[k]
        m[k] = rng.uniform(lo, hi, size=d)
    for k in range(7, 14):
        lo, hi = M_RANGES[k]
        m[k] = rng.uniform(lo, hi, size=q - d)
    return m


def smooth_eta(x: np.ndarray, m: dict, d: int) -> np.ndarray:
    """True linear predictors of the smooth-effects scenario at covariates ``x`` (n x 3)."""
    x1, x2, x3 = x[:, 0:1], x[:, 1:2], x[:, 2:3]
    mean = (m[1] * np.sin(np.pi * x1) + np.exp(m[2] * x2)
            + m[3] * x3 ** 11 * (m[4] * (1 - x3)) ** 6 + m[5] * (m[6] * x3) ** 3 * (1 - x3) ** 10)
    tp = 2 * np.pi
    cov = (m[7] + m[8] * np.sin(tp * (x1 + m[9])) + m[10] * np.cos(tp * (x1 + m[9]))
           + m[11] * np.sin(tp * (x2 + m[12])) + m[13] * np.cos(tp * (x2 + m[12])))
    return np.hstack([mean, cov])


def sample_gaussian(eta: np.ndarray, d: int, parametrisation: str, rng) -> np.ndarray:
    """Draw ``y_i ~ N(mu_i, Sigma_i)`` with ``Sigma_i`` encoded by ``eta_i``."""
    layout = build_theta_layout(d)
    n = eta.shape[0]
    eps = rng.standard_normal((n, d))
    mu = eta[:, :d]
    if parametrisation == "mcd":
        T = np.zeros((n, d, d))
        T[:, np.arange(d), np.arange(d)] = 1.0
        T[:, layout.rows0, layout.cols0] = eta[:, layout.offdiag0]
        sd = np.exp(0.5 * eta[:, d:2 * d])
        # T r = D eps  =>  r = T^{-1} D eps
        r = np.linalg.solve(T, (sd * eps)[..., None])[..., 0]
    else:
        theta = theta_from_eta(layout, eta)
        gamma, U = np.linalg.eigh(theta)
        r = np.einsum("nij,nj->ni", U, np.exp(0.5 * gamma) * eps)
    return mu + r


def gen_smooth_scenario(config: ScenarioConfig):
    """Covariates ``X`` (n x 3), responses ``y`` (n x d), true predictors (n x q) and the ``m`` draws."""
    d, n = config.d, config.n
    q = build_theta_layout(d).q
    r_coef, r_x, r_eps = _streams(config.seed, 3)
    m = draw_m(r_coef, q, d)
    X = r_x.uniform(size=(n, 3))
    eta = smooth_eta(X, m, d)
    y = sample_gaussian(eta, d, config.parametrisation, r_eps)
    return X, y, eta, m


def parsimony_alpha(d: int, s: int) -> float:
    return 1.0 - d ** -0.5 if s == 1 else 1.0 - 2.0 / d


def gen_parsimonious_scenario(config: ScenarioConfig, beta_scale: float = 0.1):
    """Design ``X`` (n x 10, first column ones), responses and the fixed mask of covariance predictors.

    Means depend on all nine covariates.  Each covariance predictor keeps
    only its intercept with probability ``alpha`` (``config.alpha`` if given,
    otherwise ``1 - d^{-1/2}`` for ``s=1`` and ``1 - 2/d`` for ``s=2``).
    """
    d, n = config.d, config.n
    layout = build_theta_layout(d)
    q = layout.q
    alpha = parsimony_alpha(d, config.s) if config.alpha is None else float(config.alpha)
    if not 0.0 <= alpha <= 1.0:
        raise ConfigurationError(f"alpha must lie in [0, 1], got {alpha}")
    r_mask, r_coef, r_x, r_eps = _streams(config.seed, 4)
    fixed = r_mask.random(q - d) < alpha
    X = np.column_stack([np.ones(n), r_x.uniform(-1, 1, size=(n, 9))])
    beta = r_coef.normal(scale=beta_scale, size=(q, 10))
    beta[:d, 0] = r_coef.normal(size=d)
    beta[d:2 * d, 0] = 0.0
    beta[d:, 1:][fixed] = 0.0
    eta = X @ beta.T
    y = sample_gaussian(eta, d, config.parametrisation, r_eps)
    return X, y, fixed, eta


def parsimonious_spec(X: np.ndarray, fixed_mask: np.ndarray, d: int, ridge: float = 0.0) -> ModelSpec:
    """ModelSpec with shared design ``X`` for modelled predictors and intercepts elsewhere."""
    layout = build_theta_layout(d)
    fixed = np.concatenate([np.zeros(d, dtype=bool), np.asarray(fixed_mask, bool)])
    designs = [None if f else X for f in fixed]
    penalties = []
    if ridge > 0:
        off = 0
        for j, f in enumerate(fixed):
            w = 1 if f else X.shape[1]
            if not f:
                penalties.append(PenaltyBlock(np.eye(w - 1), off + 1, off + w, w - 1, f"ridge{j}"))
            off += w
    return ModelSpec(layout, designs, penalties, n=X.shape[0])
