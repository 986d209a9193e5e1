import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gamcov import mcd
from gamcov.exceptions import ConfigurationError, NumericError
from gamcov.families import FixedCovarianceFamily, make_family
from gamcov.fitting import (LAM_MAX, LAM_MIN, FitOptions, Problem, _cholesky_perturbed, ab_terms,
                            beta_lambda_sensitivity, c_term, c_trace, efs_update, fit, fs_update, laml,
                            laml_terms, newton_map)
from gamcov.layout import build_theta_layout
from gamcov.model import ModelSpec, PenaltyBlock, eta_from_beta
from gamcov.oracles import gaussian_ridge_evidence, naive_c_term

from helpers import random_spec

LOG2PI = np.log(2 * np.pi)


# --------------------------------------------------------------------------- updates


def test_fs_update_examples():
    assert fs_update(2.0, 1.0, 3.0) == 6.0
    assert fs_update(1.7, 0.4, 0.4) == pytest.approx(1.7)
    assert fs_update(5.0, 2.0, 0.0) == LAM_MIN
    assert fs_update(5.0, 0.0, 1.0) == LAM_MAX
    with pytest.raises(NumericError):
        fs_update(1.0, 1.0, -1.0)


def test_efs_update_examples():
    assert efs_update(2.0, 1.0, 3.0, -1.0) == 8.0
    assert efs_update(2.0, 1.0, 3.0, 1.0) == 3.0


@settings(max_examples=100, deadline=None)
@given(lam=st.floats(1e-5, 1e5), a=st.floats(1e-6, 1e3), b=st.floats(0, 1e3), c=st.floats(-1e3, 1e3))
def test_efs_moves_along_gradient_sign(lam, a, b, c):
    new = efs_update(lam, a, b, c)
    grad = -a + b - c
    if LAM_MIN < new < LAM_MAX:
        if grad > 1e-9 * (a + b + abs(c)):
            assert new >= lam * (1 - 1e-12)
        elif grad < -1e-9 * (a + b + abs(c)):
            assert new <= lam * (1 + 1e-12)
    assert efs_update(lam, a, b, 0.0) == fs_update(lam, a, b)


# --------------------------------------------------------------------------- Newton and LAML


def _ridge_problem(seed=0, n=40, p=5, sigma2=0.7):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p))
    y = X @ rng.normal(size=p) + rng.normal(size=n) * np.sqrt(sigma2)
    spec = ModelSpec(build_theta_layout(1), [X], [PenaltyBlock(np.eye(p), 0, p, p, "ridge")], n=n, mean_only=True)
    return Problem(spec, FixedCovarianceFamily([[sigma2]]), y[:, None]), X, y, sigma2


def test_intercept_only_d1_closed_form():
    rng = np.random.default_rng(0)
    y = rng.normal(1.5, 2.0, size=(100, 1))
    layout = build_theta_layout(1)
    spec = ModelSpec(layout, [None, None], n=100)
    st_ = fit(spec, make_family("mcd", layout), y)
    assert st_.converged and st_.outer_iters <= 2
    assert st_.beta[0] == pytest.approx(y.mean(), abs=1e-8)
    assert st_.beta[1] == pytest.approx(np.log(y.var()), abs=1e-8)


def test_quadratic_model_single_newton_step():
    prob, X, y, _ = _ridge_problem()
    for beta0 in (np.zeros(5), np.full(5, 30.0)):
        nr = newton_map(prob, [0.5], beta0)
        assert nr.iters == 1 and nr.converged


@pytest.mark.parametrize("lam", [1e-3, 0.3, 1.0, 50.0])
def test_laplace_exact_on_ridge(lam):
    prob, X, y, s2 = _ridge_problem(seed=1)
    nr = newton_map(prob, [lam], np.zeros(5))
    ref = gaussian_ridge_evidence(X, y, s2, lam, np.eye(5))
    assert abs(laml(prob, [lam], nr) - ref) < 1e-8 * (1 + abs(ref))


def test_unpenalized_laml_formula():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(30, 3))
    spec = ModelSpec(build_theta_layout(1), [X], n=30, mean_only=True)
    prob = Problem(spec, FixedCovarianceFamily([[1.3]]), rng.normal(size=(30, 1)))
    nr = newton_map(prob, np.zeros(0), np.zeros(3))
    expect = nr.loglik - 0.5 * np.linalg.slogdet(nr.H)[1] + 1.5 * LOG2PI
    assert laml(prob, np.zeros(0), nr) == pytest.approx(expect, rel=1e-12)


def test_laml_tail_decreasing():
    prob, *_ = _ridge_problem(seed=3)
    vals = []
    for lam in np.logspace(2, 7, 6):
        vals.append(laml(prob, [lam], newton_map(prob, [lam], np.zeros(5))))
    assert np.all(np.isfinite(vals)) and np.all(np.diff(vals) < 0)


def test_a_term_spot_check():
    rng = np.random.default_rng(4)
    spec = random_spec(rng, 2, 60)
    fam = make_family("mcd", spec.layout)
    y = rng.normal(size=(60, 2))
    prob = Problem(spec, fam, y)
    lam = np.ones(len(spec.penalties))
    nr = newton_map(prob, lam, np.zeros(spec.p) + 0.01)
    a, _ = ab_terms(prob, lam, nr)
    for u, pen in enumerate(spec.penalties):
        S = pen.embed(spec.p)
        loop = sum(nr.beta[i] * S[i, j] * nr.beta[j] for i in range(spec.p) for j in range(spec.p))
        assert a[u] == pytest.approx(loop, rel=1e-12)


def test_sensitivity_matches_ridge_closed_form():
    prob, X, y, s2 = _ridge_problem(seed=5)
    lam = 0.8
    nr = newton_map(prob, [lam], np.zeros(5))
    A = X.T @ X / s2
    expect = -np.linalg.solve(A + lam * np.eye(5), np.linalg.solve(A + lam * np.eye(5), X.T @ y[:] / s2))
    np.testing.assert_allclose(beta_lambda_sensitivity(prob, nr, 0), expect, rtol=1e-10)


def test_sensitivity_zero_in_null_space():
    prob, X, y, s2 = _ridge_problem(seed=6)
    nr = newton_map(prob, [1.0], np.zeros(5))
    nr.beta[:] = 0.0
    np.testing.assert_array_equal(beta_lambda_sensitivity(prob, nr, 0), 0.0)


def _mcd_problem(seed, d=2, n=60, **kw):
    rng = np.random.default_rng(seed)
    spec = random_spec(rng, d, n, **kw)
    fam = make_family("mcd", spec.layout)
    y = rng.normal(size=(n, d)) @ np.diag(np.linspace(1, 1.5, d))
    opts = FitOptions(grad_tol=1e-12)
    return Problem(spec, fam, y, opts), spec, fam, y


def test_sensitivity_matches_refit_fd():
    prob, spec, fam, y = _mcd_problem(7)
    lam = np.full(len(spec.penalties), 0.7)
    nr = newton_map(prob, lam, np.zeros(spec.p))
    for u in range(len(lam)):
        h = 1e-4 * lam[u]
        lp, lm = lam.copy(), lam.copy()
        lp[u] += h
        lm[u] -= h
        fd = (newton_map(prob, lp, nr.beta).beta - newton_map(prob, lm, nr.beta).beta) / (2 * h)
        an = beta_lambda_sensitivity(prob, nr, u)
        assert np.max(np.abs(an - fd)) < 1e-4 * (np.max(np.abs(an)) + 1e-12)


def _naive_c(prob, nr, dbeta):
    spec, fam = prob.spec, prob.family
    eta = eta_from_beta(spec, nr.beta)
    _, _, _, t = fam.derivs(eta, prob.y, 3)
    T = mcd.dense_third(fam.triples, t, spec.q)
    Hinv = np.linalg.inv(nr.H)
    designs = [spec.dense_design(j) for j in range(spec.q)]
    return naive_c_term(designs, Hinv, T, eta_from_beta(spec, dbeta))


@pytest.mark.parametrize("seed", range(4))
def test_c_term_efficient_equals_naive(seed):
    prob, spec, fam, y = _mcd_problem(seed, d=2, n=20, p_range=(2, 2), fixed_frac=0.3)
    lam = np.ones(len(spec.penalties))
    nr = newton_map(prob, lam, np.zeros(spec.p))
    dbeta = np.random.default_rng(seed).normal(size=spec.p)
    raw = c_trace(prob, nr, [dbeta])[0]
    ref = _naive_c(prob, nr, dbeta)
    assert abs(raw - ref) <= 1e-10 * abs(ref)


def test_c_term_intercept_only_covariance():
    fixed = np.r_[np.zeros(2, bool), np.ones(3, bool)]
    prob, spec, fam, y = _mcd_problem(9, d=2, n=25, fixed=fixed, p_range=(3, 4))
    lam = np.ones(len(spec.penalties))
    nr = newton_map(prob, lam, np.zeros(spec.p))
    for u in range(len(lam)):
        db = beta_lambda_sensitivity(prob, nr, u)
        raw = c_trace(prob, nr, [db])[0]
        assert abs(raw - _naive_c(prob, nr, db)) <= 1e-10 * abs(raw)
        assert c_term(prob, nr, u) == pytest.approx(-raw, rel=1e-14)


def test_c_zero_without_third_derivatives():
    prob, *_ = _ridge_problem()
    nr = newton_map(prob, [1.0], np.zeros(5))
    assert laml_terms(prob, [1.0], nr).c[0] == 0.0


def test_laml_gradient_matches_fd():
    prob, spec, fam, y = _mcd_problem(11, d=2, n=80)
    rng = np.random.default_rng(0)
    lam = np.exp(rng.uniform(-2, 2, size=len(spec.penalties)))
    nr = newton_map(prob, lam, np.zeros(spec.p))
    grad = laml_terms(prob, lam, nr).gradient
    for u in range(len(lam)):
        h = 1e-4 * lam[u]
        lp, lm = lam.copy(), lam.copy()
        lp[u] += h
        lm[u] -= h
        vp = laml(prob, lp, newton_map(prob, lp, nr.beta))
        vm = laml(prob, lm, newton_map(prob, lm, nr.beta))
        fd = (vp - vm) / (2 * h)
        assert abs(grad[u] - fd) <= 1e-3 * max(abs(fd), 1e-6)


def test_perturbation_flag():
    H = np.array([[1.0, 2.0], [2.0, 1.0]])
    L, Hp, pert = _cholesky_perturbed(H)
    assert pert and np.all(np.linalg.eigvalsh(Hp) > 0)
    np.testing.assert_allclose(L @ L.T, Hp)
    _, _, pert = _cholesky_perturbed(np.eye(2))
    assert not pert


# --------------------------------------------------------------------------- full fits


def test_efs_rejected_for_logm():
    spec = random_spec(np.random.default_rng(0), 2, 30)
    with pytest.raises(ConfigurationError, match="EFS unsupported for logM"):
        fit(spec, make_family("logm", spec.layout), np.zeros((30, 2)), "efs")


@pytest.mark.parametrize("method", ["fs", "efs"])
def test_fit_stationary_and_monotone(method):
    from gamcov.simulate import ScenarioConfig, gen_smooth_scenario
    from gamcov.model import build_model_spec, parse_config
    X, y, _, _ = gen_smooth_scenario(ScenarioConfig(d=3, n=300, seed=4))
    data = {"x1": X[:, 0], "x2": X[:, 1], "x3": X[:, 2], "y1": y[:, 0], "y2": y[:, 1], "y3": y[:, 2]}
    cfg = parse_config({"responses": ["y1", "y2", "y3"], "mean": [{"covariate": "x1", "k": 6}],
                        "covariance": [{"covariate": "x2", "k": 5}]})
    spec = build_model_spec(cfg, data)
    res = fit(spec, make_family("mcd", spec.layout), y, method)
    assert res.converged
    assert res.grad_norm < 1e-6
    traj = np.array(res.laml_trajectory)
    assert np.all(np.diff(traj) >= -1e-8 * np.abs(traj[:-1]))
    assert len(res.lam_trajectory) == len(traj) == len(res.perturbation_flags)


def test_logm_fs_fit_converges():
    rng = np.random.default_rng(8)
    spec = random_spec(rng, 2, 120, fixed_frac=0.3)
    y = rng.normal(size=(120, 2))
    res = fit(spec, make_family("logm", spec.layout), y, "fs")
    assert res.converged and res.grad_norm < 1e-6
