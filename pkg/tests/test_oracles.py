import numpy as np
import pytest

from gamcov.layout import build_theta_layout
from gamcov.oracles import (dense_loglik_oracle, fd_derivs, fd_jacobian, gaussian_ridge_evidence,
                            logm_sigma_oracle, matrix_exp_oracle, mcd_sigma_oracle)


def test_dense_loglik_examples():
    assert dense_loglik_oracle(np.zeros(3), np.eye(3), np.zeros(3)) == 0.0
    assert dense_loglik_oracle([0.0], [[np.e]], [1.0]) == pytest.approx(-0.5 - 0.5 / np.e, abs=1e-15)
    assert dense_loglik_oracle([0.0], [[np.e]], [1.0]) == pytest.approx(-0.683939, abs=1e-6)


def test_matrix_exp_examples():
    np.testing.assert_allclose(matrix_exp_oracle(np.zeros((3, 3))), np.eye(3), atol=1e-15)
    np.testing.assert_allclose(matrix_exp_oracle(np.diag([0.5, -2.0])), np.diag(np.exp([0.5, -2.0])), rtol=1e-14)
    rng = np.random.default_rng(0)
    A = rng.normal(size=(6, 6))
    th = A + A.T
    g, U = np.linalg.eigh(th)
    np.testing.assert_allclose(matrix_exp_oracle(th), U @ np.diag(np.exp(g)) @ U.T, rtol=1e-10, atol=1e-10)


def test_sigma_oracles_agree_at_d1():
    eta = np.array([0.3, -0.4])
    np.testing.assert_allclose(mcd_sigma_oracle(1, eta), logm_sigma_oracle(1, eta), rtol=1e-14)


def test_fd_linear_and_quadratic():
    a = np.array([1.0, -2.0, 0.5])
    x0 = np.array([0.3, 0.1, -0.7])
    np.testing.assert_allclose(fd_derivs(lambda x: a @ x, x0, order=1), a, atol=1e-9)
    np.testing.assert_allclose(fd_derivs(lambda x: a @ x, x0, order=2), 0, atol=1e-5)
    A = np.array([[2.0, 0.3, 0], [0.3, 1.0, -0.2], [0, -0.2, 3.0]])
    np.testing.assert_allclose(fd_derivs(lambda x: 0.5 * x @ A @ x, x0, order=2), A, atol=1e-6)
    np.testing.assert_allclose(fd_jacobian(lambda x: A @ x, x0), A, atol=1e-8)


def test_fd_third_order_cubic():
    f = lambda x: x[0] ** 2 * x[1] + x[1] ** 3
    T = fd_derivs(f, np.array([0.2, -0.3]), order=3)
    assert T[0, 0, 1] == pytest.approx(2, abs=1e-5)
    assert T[1, 1, 1] == pytest.approx(6, abs=1e-5)
    assert T[0, 0, 0] == pytest.approx(0, abs=1e-5)


def test_ridge_evidence_matches_bayes_identity():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(15, 3))
    y = rng.normal(size=15)
    sigma2, lam = 0.6, 2.0
    # p(y) = p(y|b) p(b) / p(b|y) at b = 0
    A = X.T @ X / sigma2 + lam * np.eye(3)
    m = np.linalg.solve(A, X.T @ y / sigma2)
    log_lik = dense_loglik_oracle(np.zeros(15), sigma2 * np.eye(15), y) - 7.5 * np.log(2 * np.pi)
    log_prior = dense_loglik_oracle(np.zeros(3), np.eye(3) / lam, np.zeros(3)) - 1.5 * np.log(2 * np.pi)
    log_post = dense_loglik_oracle(m, np.linalg.inv(A), np.zeros(3)) - 1.5 * np.log(2 * np.pi)
    assert gaussian_ridge_evidence(X, y, sigma2, lam, np.eye(3)) == pytest.approx(log_lik + log_prior - log_post,
                                                                                  rel=1e-12)
