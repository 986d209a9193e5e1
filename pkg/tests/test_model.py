import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gamcov.exceptions import ConfigurationError, DataError
from gamcov.model import (ModelSpec, build_model_spec, eta_from_beta, eta_rows, parse_config, read_csv,
                          spec_for_data, write_csv)
from gamcov.layout import build_theta_layout

from helpers import random_spec


def test_zero_beta_gives_zero_eta():
    spec = random_spec(np.random.default_rng(0), 3, 20)
    np.testing.assert_array_equal(eta_from_beta(spec, np.zeros(spec.p)), np.zeros((20, spec.q)))


def test_intercept_only_broadcast():
    lay = build_theta_layout(2)
    spec = ModelSpec(lay, [None] * lay.q, n=7)
    beta = np.zeros(spec.p)
    beta[spec.intercept_index(3)] = 2.5
    eta = eta_from_beta(spec, beta)
    np.testing.assert_array_equal(eta[:, 3], 2.5)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10 ** 6), d=st.integers(1, 4))
def test_eta_matches_row_dot_products(seed, d):
    rng = np.random.default_rng(seed)
    spec = random_spec(rng, d, 15)
    beta = rng.normal(size=spec.p)
    eta = eta_from_beta(spec, beta)
    for i in range(spec.n):
        for j in range(spec.q):
            x = spec.dense_design(j)[i]
            assert abs(eta[i, j] - x @ beta[spec.coef_slice(j)]) <= 1e-14 * (1 + abs(eta[i, j]))
    np.testing.assert_array_equal(eta_rows(spec, beta, 3, 9), eta[3:9])


def _data(n=60, seed=0):
    rng = np.random.default_rng(seed)
    return {"x1": rng.uniform(size=n), "x2": rng.uniform(size=n), "y1": rng.normal(size=n),
            "y2": rng.normal(size=n)}


def test_config_shared_terms_and_fixed():
    cfg = parse_config({"responses": ["y1", "y2"], "mean": [{"covariate": "x1", "k": 6}],
                        "covariance": ["x2"], "fixed": [5]})
    assert cfg.d == 2 and len(cfg.terms) == 5 and cfg.fixed == {4}
    spec = build_model_spec(cfg, _data())
    assert spec.designs[4] is None
    assert spec.widths.tolist() == [6, 6, 10, 10, 1]
    assert len(spec.penalties) == 4


def test_config_per_predictor_list():
    cfg = parse_config({"responses": ["y1"], "predictors": [["x1"], []]})
    spec = build_model_spec(cfg, _data())
    assert spec.designs[1] is None and spec.designs[0].shape[1] == 10


@pytest.mark.parametrize("raw, field", [
    ({"responses": []}, "responses"),
    ({"responses": ["y1"], "parametrisation": "chol"}, "parametrisation"),
    ({"responses": ["y1"], "method": "newton"}, "method"),
    ({"responses": ["y1"], "fixed": [7]}, "fixed"),
    ({"responses": ["y1"], "predictors": [[], [], []]}, "predictors"),
    ({"responses": ["y1"], "mean": [{"covariate": "x1", "k": 1}]}, "mean"),
    ({"responses": ["y1"], "mean": [{"cov": "x1"}]}, "mean"),
])
def test_config_errors_name_field(raw, field):
    with pytest.raises(ConfigurationError, match=field):
        parse_config(raw)


def test_missing_covariate():
    cfg = parse_config({"responses": ["y1"], "mean": ["x9"]})
    with pytest.raises(DataError, match="x9"):
        build_model_spec(cfg, _data())


def test_csv_round_trip_and_missing_values(tmp_path):
    p = tmp_path / "d.csv"
    vals = np.random.default_rng(0).normal(size=(5, 2))
    write_csv(p, ["a", "b"], vals)
    back = read_csv(p)
    np.testing.assert_array_equal(np.column_stack([back["a"], back["b"]]), vals)
    p.write_text("a,b\n1,2\n3,\n")
    with pytest.raises(DataError, match="missing"):
        read_csv(p)


def test_spec_for_training_data_reproduces_designs():
    data = _data()
    cfg = parse_config({"responses": ["y1", "y2"], "mean": ["x1", "x2"], "covariance": ["x1"]})
    spec = build_model_spec(cfg, data)
    again = spec_for_data(spec, data)
    for X, Y in zip(spec.designs, again.designs):
        np.testing.assert_array_equal(X, Y)
