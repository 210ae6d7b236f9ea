import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_difference, rel_err
from robust_ate.cbps import (
    BalanceFeatureMap,
    PropensityModel,
    balance_features,
    cbps_jacobian,
    cbps_moment,
    fit_logistic,
    propensity,
)


def test_propensity_closed_forms():
    assert propensity(np.array([1.0, 2.0]), PropensityModel(np.zeros(2))) == 0.5
    assert propensity(np.array([1.0]), PropensityModel(np.array([np.log(3)]))) == pytest.approx(0.75)


def test_propensity_clipped_without_overflow():
    with np.errstate(over="raise"):
        hi = propensity(np.array([1.0]), PropensityModel(np.array([1000.0])))
        lo = propensity(np.array([1.0]), PropensityModel(np.array([-1e4])))
    assert hi == 1 - 1e-6 and lo == 1e-6


def test_clip_eps_validated():
    with pytest.raises(ValueError):
        PropensityModel(np.zeros(1), clip_eps=0.5)


def test_balance_features():
    np.testing.assert_array_equal(balance_features(np.array([2.0, -1.0])), [2, -1, 4, 1])
    np.testing.assert_array_equal(balance_features(np.zeros(3)), np.zeros(6))
    np.testing.assert_array_equal(balance_features(np.array([3.0]), "identity"), [3])
    assert BalanceFeatureMap().dim(4) == 8
    with pytest.raises(ValueError):
        BalanceFeatureMap("cubic")


def test_moment_hand_values():
    half = PropensityModel(np.zeros(1))
    np.testing.assert_allclose(cbps_moment(1, np.array([1.0]), half), [2, 2])
    np.testing.assert_allclose(cbps_moment(0, np.array([1.0]), half), [-2, -2])
    # x = sqrt(2) gives f = (sqrt 2, 2); pick beta2 so pi = 0.25, then scale
    x = np.array([np.sqrt(2.0)])
    quarter = PropensityModel(np.array([np.log(1 / 3) / np.sqrt(2.0)]))
    np.testing.assert_allclose(cbps_moment(1, x, quarter), 4 * balance_features(x))


def test_jacobian_hand_value():
    jac = cbps_jacobian(1, np.array([1.0]), PropensityModel(np.zeros(1)), "identity")
    np.testing.assert_allclose(jac, [[-1.0]])


def test_jacobian_zero_at_origin():
    np.testing.assert_array_equal(cbps_jacobian(1, np.zeros(2), PropensityModel(np.ones(2))), 0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.0, 1.0]), st.sampled_from(["identity", "identity+square"]))
def test_jacobian_matches_finite_differences(seed, t, kind):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(3)
    b = 0.5 * rng.standard_normal(3)
    jac = cbps_jacobian(t, x, PropensityModel(b), kind)
    fd = central_difference(lambda v: cbps_moment(t, x, PropensityModel(v), kind), b)
    assert rel_err(jac, fd) < 1e-6


def test_vectorized_moments_match_rows():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((5, 2))
    t = np.array([1, 0, 1, 1, 0.0])
    m = PropensityModel(np.array([0.3, -0.2]))
    rows = np.array([cbps_moment(t[i], X[i], m) for i in range(5)])
    np.testing.assert_allclose(cbps_moment(t, X, m), rows)


def test_logistic_recovers_coefficients():
    rng = np.random.default_rng(1)
    X = np.column_stack([np.ones(5000), rng.standard_normal(5000)])
    beta = np.array([-0.3, 0.8])
    T = (rng.random(5000) < 1 / (1 + np.exp(-X @ beta))).astype(float)
    np.testing.assert_allclose(fit_logistic(X, T, ridge=0.0), beta, atol=0.1)


def test_logistic_finite_under_separation():
    X = np.column_stack([np.ones(6), np.arange(6.0)])
    T = np.array([0, 0, 0, 1, 1, 1.0])
    assert np.all(np.isfinite(fit_logistic(X, T)))
