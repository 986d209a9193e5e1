"""Penalized Newton estimation and Fellner-Schall smoothing-parameter selection.

The penalized log-likelihood is ``L(beta) = lbar(beta) - beta' S^lam beta / 2``
with ``S^lam = sum_u lam_u S^u`` and ``H = -d2 lbar + S^lam``.  The Laplace
approximate marginal likelihood is

    V(lam) = L(bhat) + 1/2 log|S^lam|_+ - 1/2 log|H| + M_p/2 log(2 pi)

and its derivative in ``lam_u`` is ``(-a + b - c)/2`` with
``a = bhat' S^u bhat``, ``b = tr(S^lam+ S^u) - tr(H^-1 S^u)`` and
``c = -tr(H^-1 d(d2 lbar)/d lam_u)``, the latter needing third derivatives.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.linalg import cho_solve, cholesky, eigh, solve_triangular

from .accumulate import DEFAULT_BUDGET, BufferMeter, assemble, plan_blocks
from .exceptions import (ConfigurationError, InitializationError, LineSearchError, NumericError,
                         UnsupportedOperationError)
from .families import DerivSource, Family
from .model import ModelSpec, eta_from_beta

LOG2PI = np.log(2 * np.pi)
LAM_MIN = 1e-7
LAM_MAX = 1e7


@dataclass
class FitOptions:
    method: str = "fs"
    grad_tol: float = 1e-7
    outer_tol: float = 1e-4
    max_outer: int = 200
    max_newton: int = 100
    max_halvings: int = 30
    lam_min: float = LAM_MIN
    lam_max: float = LAM_MAX
    lam_init: float = 1.0
    budget: int = DEFAULT_BUDGET
    path: str = "standard"
    threads: int = 1
    blocks: int | None = None
    laml_drop_rtol: float = 1e-11


class _TimedSource(DerivSource):
    def __init__(self, *args, clock=None, **kw):
        super().__init__(*args, **kw)
        self.clock = clock if clock is not None else {"derivatives": 0.0}

    def __call__(self, start, stop, order=2):
        t0 = time.perf_counter()
        try:
            return super().__call__(start, stop, order)
        finally:
            self.clock["derivatives"] += time.perf_counter() - t0


class Problem:
    """Data, model and accumulation settings shared by every inner fit."""

    def __init__(self, spec: ModelSpec, family: Family, y, options: FitOptions | None = None):
        self.spec = spec
        self.family = family
        self.y = np.asarray(y, dtype=float)
        self.options = options or FitOptions()
        o = self.options
        self.plan = plan_blocks(spec, family, o.budget, o.path, o.threads, o.blocks)
        self._plan3 = None
        self.meter = BufferMeter()
        self.timings = {"derivatives": 0.0, "accumulation": 0.0, "solve": 0.0}
        self.penalty = PenaltyStructure(spec)
        self.n_evals = 0

    @property
    def plan3(self):
        if self._plan3 is None:
            o = self.options
            self._plan3 = plan_blocks(self.spec, self.family, o.budget, "standard", 1, None, order=3)
        return self._plan3

    def source(self, beta) -> DerivSource:
        return _TimedSource(self.spec, self.family, self.y, beta=beta, clock=self.timings)

    def evaluate(self, beta):
        """``(lbar, grad, hess)`` at ``beta`` including the Gaussian constant."""
        t0 = time.perf_counter()
        d0 = self.timings["derivatives"]
        acc = assemble(self.spec, self.source(beta), self.plan, self.meter, self.options.threads)
        elapsed = time.perf_counter() - t0
        self.timings["accumulation"] += elapsed - (self.timings["derivatives"] - d0)
        self.n_evals += 1
        ll = acc.loglik + self.spec.n * self.family.constant()
        return ll, acc.grad, acc.hess

    def loglik(self, beta) -> float:
        src = self.source(beta)
        total = 0.0
        for a, b in self.plan.ranges:
            total += float(src(a, b, 0).loglik.sum())
        return total + self.spec.n * self.family.constant()


class PenaltyStructure:
    """Connected groups of overlapping penalties with their structural ranks."""

    def __init__(self, spec: ModelSpec):
        pens = spec.penalties
        self.spec = spec
        self.U = len(pens)
        groups = []
        for u, pen in enumerate(pens):
            hit = [g for g in groups if any(pens[v].start < pen.stop and pen.start < pens[v].stop for v in g)]
            merged = [u]
            for g in hit:
                merged.extend(g)
                groups.remove(g)
            groups.append(sorted(merged))
        self.groups = groups
        self.group_range = []
        self.group_rank = []
        for g in groups:
            lo = min(pens[u].start for u in g)
            hi = max(pens[u].stop for u in g)
            self.group_range.append((lo, hi))
            Ssum = np.zeros((hi - lo, hi - lo))
            for u in g:
                Ssum[pens[u].start - lo:pens[u].stop - lo, pens[u].start - lo:pens[u].stop - lo] += pens[u].S
            ev = np.linalg.eigvalsh(Ssum)
            top = ev.max() if ev.size else 0.0
            self.group_rank.append(int(np.sum(ev > 1e-10 * top)) if top > 0 else 0)
        self.rank = int(sum(self.group_rank))
        self.Mp = spec.p - self.rank

    def _group_matrix(self, gi, lam):
        lo, hi = self.group_range[gi]
        S = np.zeros((hi - lo, hi - lo))
        for u in self.groups[gi]:
            pen = self.spec.penalties[u]
            S[pen.start - lo:pen.stop - lo, pen.start - lo:pen.stop - lo] += lam[u] * pen.S
        return S

    def _group_eig(self, gi, lam):
        ev, V = eigh(self._group_matrix(gi, lam))
        r = self.group_rank[gi]
        return ev[len(ev) - r:], V[:, len(ev) - r:]

    def logdet_plus(self, lam) -> float:
        total = 0.0
        for gi in range(len(self.groups)):
            ev, _ = self._group_eig(gi, lam)
            if np.any(ev <= 0):
                raise NumericError("penalty pseudo-determinant is not positive")
            total += float(np.sum(np.log(ev)))
        return total

    def trace_pinv(self, lam) -> np.ndarray:
        """``tr(S^lam+ S^u)`` for every penalty ``u``."""
        out = np.zeros(self.U)
        for gi, g in enumerate(self.groups):
            lo, _ = self.group_range[gi]
            ev, V = self._group_eig(gi, lam)
            for u in g:
                pen = self.spec.penalties[u]
                Vu = V[pen.start - lo:pen.stop - lo]
                out[u] = float(np.sum((Vu / ev) * (pen.S @ Vu)))
        return out


@dataclass
class NewtonResult:
    beta: np.ndarray
    H: np.ndarray
    chol: np.ndarray
    loglik: float
    objective: float
    grad: np.ndarray
    iters: int
    perturbed: bool
    converged: bool

    @property
    def grad_norm(self) -> float:
        return float(np.max(np.abs(self.grad))) if self.grad.size else 0.0


def _cholesky_perturbed(H):
    """Lower Cholesky factor, adding ``tau I`` (doubling from ``1e-7 |H|_inf``) when needed."""
    try:
        return cholesky(H, lower=True, check_finite=False), H, False
    except np.linalg.LinAlgError:
        pass
    scale = np.max(np.sum(np.abs(H), axis=1)) if H.size else 1.0
    tau = 1e-7 * (scale if scale > 0 else 1.0)
    eye = np.eye(H.shape[0])
    for _ in range(200):
        Hp = H + tau * eye
        try:
            return cholesky(Hp, lower=True, check_finite=False), Hp, True
        except np.linalg.LinAlgError:
            tau *= 2.0
    raise NumericError("penalized Hessian could not be made positive definite")


def _safe_eval(problem, beta):
    try:
        ll, g, H = problem.evaluate(beta)
    except (OverflowError, ArithmeticError, ValueError):
        return None
    if not np.isfinite(ll) or not np.all(np.isfinite(g)) or not np.all(np.isfinite(H)):
        return None
    return ll, g, H


def newton_map(problem: Problem, lam, beta0) -> NewtonResult:
    """Maximize ``L(beta)`` by Newton's method with step halving."""
    o = problem.options
    spec = problem.spec
    lam = np.asarray(lam, float)
    S = spec.total_penalty(lam) if spec.penalties else np.zeros((spec.p, spec.p))
    beta = np.asarray(beta0, dtype=float).copy()
    ev = _safe_eval(problem, beta)
    if ev is None:
        raise InitializationError("log-likelihood is not finite at the starting coefficients")
    ll, g, Hl = ev
    perturbed_any = False
    iters = 0
    polished = False
    while True:
        obj = ll - 0.5 * spec.penalty_quad(beta, lam)
        grad = g - S @ beta
        Hpen = -Hl + S
        t0 = time.perf_counter()
        chol, Hused, pert = _cholesky_perturbed(Hpen)
        problem.timings["solve"] += time.perf_counter() - t0
        gnorm = float(np.max(np.abs(grad))) if grad.size else 0.0
        tol = o.grad_tol * (1.0 + abs(obj))
        converged = gnorm < tol
        if converged and (polished or gnorm < 1e-9 or pert):
            return NewtonResult(beta, Hused, chol, ll, obj, grad, iters, perturbed_any or pert, True)
        if iters >= o.max_newton:
            return NewtonResult(beta, Hused, chol, ll, obj, grad, iters, perturbed_any or pert, converged)
        perturbed_any |= pert
        step = cho_solve((chol, True), grad)
        alpha = 1.0
        accepted = None
        floor = obj - 8 * np.finfo(float).eps * max(1.0, abs(obj))
        for _ in range(o.max_halvings + 1):
            cand = beta + alpha * step
            ev = _safe_eval(problem, cand)
            if ev is not None:
                obj_c = ev[0] - 0.5 * spec.penalty_quad(cand, lam)
                if obj_c >= floor:
                    accepted = (cand, ev)
                    break
            alpha *= 0.5
        if accepted is None:
            if converged or gnorm < 100 * tol:
                return NewtonResult(beta, Hused, chol, ll, obj, grad, iters, perturbed_any, True)
            raise LineSearchError("no increase of the penalized log-likelihood after step halving",
                                  {"iteration": iters, "objective": obj, "grad_norm": gnorm,
                                   "halvings": o.max_halvings})
        iters += 1
        if converged:
            polished = True
        beta, (ll, g, Hl) = accepted


def laml(problem: Problem, lam, nr: NewtonResult) -> float:
    """Laplace approximate log marginal likelihood at the mode ``nr``."""
    lam = np.asarray(lam, float)
    ps = problem.penalty
    logdetS = ps.logdet_plus(lam) if ps.U else 0.0
    logdetH = 2.0 * float(np.sum(np.log(np.diag(nr.chol))))
    return float(nr.objective + 0.5 * logdetS - 0.5 * logdetH + 0.5 * ps.Mp * LOG2PI)


@dataclass
class LamlGradientTerms:
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    has_c: bool

    @property
    def gradient(self) -> np.ndarray:
        return 0.5 * (-self.a + self.b - self.c)


def _hinv_cols(nr: NewtonResult, lo: int, hi: int) -> np.ndarray:
    p = nr.chol.shape[0]
    E = np.zeros((p, hi - lo))
    E[lo:hi] = np.eye(hi - lo)
    return cho_solve((nr.chol, True), E)


def ab_terms(problem: Problem, lam, nr: NewtonResult):
    lam = np.asarray(lam, float)
    spec = problem.spec
    U = len(spec.penalties)
    a = np.zeros(U)
    trH = np.zeros(U)
    for u, pen in enumerate(spec.penalties):
        a[u] = pen.quad(nr.beta)
        Hi = _hinv_cols(nr, pen.start, pen.stop)[pen.start:pen.stop]
        trH[u] = float(np.sum(Hi * pen.S))
    trS = problem.penalty.trace_pinv(lam) if U else np.zeros(0)
    return a, trS - trH


def beta_lambda_sensitivity(problem: Problem, nr: NewtonResult, u: int) -> np.ndarray:
    """``d bhat / d lam_u = -H^{-1} S^u bhat``."""
    pen = problem.spec.penalties[u]
    rhs = np.zeros(problem.spec.p)
    rhs[pen.start:pen.stop] = pen.S @ nr.beta[pen.start:pen.stop]
    if not np.all(np.isfinite(nr.chol)):
        raise NumericError("singular penalized Hessian")
    return -cho_solve((nr.chol, True), rhs)


class _ThirdIndex:
    """Maps sorted third-derivative triples to the ``W^{jk}`` pairs they feed."""

    def __init__(self, triples: np.ndarray):
        combos = {}
        pair_ids = {}
        rows_t, rows_l, rows_w = [], [], []
        for t, (a, b, c) in enumerate(triples):
            seen = set()
            for (j, k), l in (((a, b), c), ((a, c), b), ((b, c), a)):
                key = (int(j), int(k), int(l))
                if key in seen:
                    continue
                seen.add(key)
                pid = pair_ids.setdefault((int(j), int(k)), len(pair_ids))
                rows_t.append(t)
                rows_l.append(int(l))
                rows_w.append(pid)
        self.pairs = np.array(sorted(pair_ids, key=pair_ids.get), dtype=np.intp).reshape(-1, 2)
        self.t = np.array(rows_t, dtype=np.intp)
        self.l = np.array(rows_l, dtype=np.intp)
        n = len(rows_t)
        self.scatter = sparse.csr_matrix((np.ones(n), (np.arange(n), np.array(rows_w, dtype=np.intp))),
                                         shape=(n, len(pair_ids)))
        self.weight = np.where(self.pairs[:, 0] == self.pairs[:, 1], 1.0, 2.0) if len(self.pairs) else np.zeros(0)


def _a_vectors(spec: ModelSpec, Hinv: np.ndarray, pairs: np.ndarray, a: int, b: int) -> np.ndarray:
    """Columns ``a_jk = (X^j Htilde_jk * X^k) 1`` on rows ``a:b``."""
    out = np.empty((b - a, len(pairs)))
    for col, (j, k) in enumerate(pairs):
        sj, sk = spec.coef_slice(int(j)), spec.coef_slice(int(k))
        Xj, Xk = spec.design_rows(int(j), a, b), spec.design_rows(int(k), a, b)
        Hjk = Hinv[sj, sk]
        if Xj is None and Xk is None:
            out[:, col] = Hjk[0, 0]
        elif Xj is None:
            out[:, col] = Xk @ Hjk[0]
        elif Xk is None:
            out[:, col] = Xj @ Hjk[:, 0]
        else:
            out[:, col] = np.einsum("ij,ij->i", Xj @ Hjk, Xk)
    return out


def eta_sensitivities(problem: Problem, nr: NewtonResult, us=None) -> list:
    us = range(len(problem.spec.penalties)) if us is None else us
    return [beta_lambda_sensitivity(problem, nr, u) for u in us]


def c_trace(problem: Problem, nr: NewtonResult, dbetas: list) -> np.ndarray:
    """``sum_jk a_jk' W^{jk}`` for each coefficient sensitivity in ``dbetas``.

    This is ``tr(H^{-1} d(d2 lbar)/d lam_u)`` computed row-block by row-block
    without ever forming a ``p x p`` third-derivative slice.
    """
    fam = problem.family
    if not fam.supports_third:
        raise UnsupportedOperationError(f"third derivatives are not available for the {fam.name} parametrisation")
    spec = problem.spec
    out = np.zeros(len(dbetas))
    triples = fam.triples
    if len(triples) == 0 or not dbetas:
        return out
    idx = _ThirdIndex(triples)
    Hinv = cho_solve((nr.chol, True), np.eye(spec.p))
    src = problem.source(nr.beta)
    for a, b in problem.plan3.ranges:
        bundle = src(a, b, 3)
        A = _a_vectors(spec, Hinv, idx.pairs, a, b)
        for i, db in enumerate(dbetas):
            eta_l = _eta_rows_from(spec, db, a, b)
            W = idx.scatter.T @ (bundle.third[:, idx.t] * eta_l[:, idx.l]).T  # (nW, n_b)
            out[i] += float(np.sum(idx.weight * np.einsum("ij,ji->j", A, W)))
    return out


def _eta_rows_from(spec, beta, a, b):
    from .model import eta_rows
    return eta_rows(spec, beta, a, b)


def c_terms(problem: Problem, nr: NewtonResult) -> np.ndarray:
    """``c_u = -tr(H^{-1} d(d2 lbar)/d lam_u)`` for every penalty."""
    return -c_trace(problem, nr, eta_sensitivities(problem, nr))


def c_term(problem: Problem, nr: NewtonResult, u: int) -> float:
    return float(-c_trace(problem, nr, [beta_lambda_sensitivity(problem, nr, u)])[0])


def laml_terms(problem: Problem, lam, nr: NewtonResult, with_c: bool = True) -> LamlGradientTerms:
    a, b = ab_terms(problem, lam, nr)
    if with_c:
        c = c_terms(problem, nr)
        return LamlGradientTerms(a, b, c, True)
    return LamlGradientTerms(a, b, np.zeros_like(a), False)


def _clamp(x, lo, hi):
    return float(min(max(x, lo), hi))


def _check_b(b):
    if b < -1e-8:
        raise NumericError(f"negative trace term b={b:.3e}; the penalized Hessian is not positive semi-definite")
    return max(b, 0.0)


def fs_update(lam_u, a, b, lam_min=LAM_MIN, lam_max=LAM_MAX) -> float:
    """Fellner-Schall update ``lam * b / a``, clamped."""
    if a <= 0:
        return float(lam_max)
    b = _check_b(b)
    return _clamp(lam_u * b / a, lam_min, lam_max)


def efs_update(lam_u, a, b, c, lam_min=LAM_MIN, lam_max=LAM_MAX) -> float:
    """Update that includes the third-derivative term and moves along the LAML gradient sign."""
    if a <= 0:
        return float(lam_max)
    b = _check_b(b)
    if c <= 0:
        return _clamp(lam_u * (b - c) / a, lam_min, lam_max)
    return _clamp(lam_u * b / (a + c), lam_min, lam_max)


@dataclass
class FitState:
    beta: np.ndarray
    lam: np.ndarray
    H: np.ndarray
    laml: float
    loglik: float
    newton_iters: int
    outer_iters: int
    converged: bool
    perturbation_applied: bool
    method: str
    family: str
    grad_norm: float
    lam_trajectory: list = field(default_factory=list)
    laml_trajectory: list = field(default_factory=list)
    perturbation_flags: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    newton: NewtonResult | None = field(default=None, repr=False)

    def report(self) -> dict:
        return {
            "method": self.method,
            "parametrisation": self.family,
            "converged": bool(self.converged),
            "outer_iterations": int(self.outer_iters),
            "newton_iterations": int(self.newton_iters),
            "laml": self.laml,
            "loglik": self.loglik,
            "gradient_inf_norm": self.grad_norm,
            "lambda": [float(x) for x in self.lam],
            "lambda_trajectory": [[float(x) for x in l] for l in self.lam_trajectory],
            "laml_trajectory": [float(x) for x in self.laml_trajectory],
            "perturbation_applied": bool(self.perturbation_applied),
            "perturbation_flags": [bool(x) for x in self.perturbation_flags],
            "timings": {k: float(v) for k, v in self.timings.items()},
        }

    def report_json(self, **kw) -> str:
        return json.dumps(self.report(), **kw)


def initial_beta(spec: ModelSpec, family: Family, y) -> np.ndarray:
    """Zero coefficients except intercepts set from the marginal moments of ``y``."""
    beta0 = np.zeros(spec.p)
    eta0 = family.initial_eta(y)
    for j in range(spec.q):
        beta0[spec.intercept_index(j)] = eta0[j]
    return beta0


def fit(spec: ModelSpec, family: Family, y, method: str = "fs", options: FitOptions | None = None,
        lam0=None, beta0=None) -> FitState:
    """Alternate penalized Newton fits and smoothing-parameter updates."""
    options = options or FitOptions()
    method = (method or options.method).lower()
    if method not in ("fs", "efs"):
        raise ConfigurationError(f"method must be 'fs' or 'efs', got {method!r}")
    if method == "efs" and not family.supports_third:
        raise ConfigurationError("EFS unsupported for " + {"logm": "logM", "mcd": "MCD"}.get(family.name, family.name))
    problem = Problem(spec, family, y, options)
    U = len(spec.penalties)
    lam = np.full(U, options.lam_init) if lam0 is None else np.asarray(lam0, float).copy()
    beta = initial_beta(spec, family, y) if beta0 is None else np.asarray(beta0, float).copy()
    t_start = time.perf_counter()

    nr = newton_map(problem, lam, beta)
    V = laml(problem, lam, nr)
    newton_iters = nr.iters
    lam_traj = [lam.copy()]
    laml_traj = [V]
    flags = [nr.perturbed]
    converged = U == 0
    outer = 0
    while not converged and outer < options.max_outer:
        outer += 1
        terms = laml_terms(problem, lam, nr, with_c=(method == "efs"))
        if method == "fs":
            prop = np.array([fs_update(lam[u], terms.a[u], terms.b[u], options.lam_min, options.lam_max)
                             for u in range(U)])
        else:
            prop = np.array([efs_update(lam[u], terms.a[u], terms.b[u], terms.c[u], options.lam_min,
                                        options.lam_max) for u in range(U)])
        step = np.log(prop) - np.log(lam)
        if np.max(np.abs(step)) < options.outer_tol:
            converged = True
            break
        accepted = False
        for _ in range(20):
            lam_new = np.exp(np.log(lam) + step)
            try:
                nr_new = newton_map(problem, lam_new, nr.beta)
            except (LineSearchError, InitializationError):
                step *= 0.5
                continue
            newton_iters += nr_new.iters
            V_new = laml(problem, lam_new, nr_new)
            if V_new >= V - options.laml_drop_rtol * abs(V):
                accepted = True
                break
            step *= 0.5
            if np.max(np.abs(step)) < options.outer_tol:
                break
        if not accepted:
            converged = np.max(np.abs(step)) < options.outer_tol
            break
        lam, nr, V = lam_new, nr_new, V_new
        lam_traj.append(lam.copy())
        laml_traj.append(V)
        flags.append(nr.perturbed)
    timings = dict(problem.timings)
    timings["total"] = time.perf_counter() - t_start
    return FitState(
        beta=nr.beta, lam=lam, H=nr.H, laml=V, loglik=nr.loglik, newton_iters=newton_iters, outer_iters=outer,
        converged=bool(converged and nr.converged), perturbation_applied=any(flags), method=method,
        family=family.name, grad_norm=nr.grad_norm, lam_trajectory=lam_traj, laml_trajectory=laml_traj,
        perturbation_flags=flags, timings=timings, newton=nr)


def fitted_moments(spec: ModelSpec, family: Family, beta) -> tuple[np.ndarray, np.ndarray]:
    """Per-row means ``(n, d)`` and covariance matrices ``(n, d, d)``."""
    eta = eta_from_beta(spec, beta)
    return eta[:, :family.d], family.sigma(eta)
