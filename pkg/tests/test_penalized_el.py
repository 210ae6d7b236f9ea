import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize, root

from conftest import central_difference, rel_err
from robust_ate.data_model import Dataset, ParameterBlocks, stack_parameters, unstack_parameters, validate_dataset
from robust_ate.exceptions import AllInfeasible, ConvexHullViolation
from robust_ate.penalized_el import (
    PenaltyConfig,
    default_screen_size,
    default_tau_grid,
    el_inner_solve,
    feasible_init,
    fit_penalized_el,
    objective_qn,
    scad,
    scad_derivative,
    screen_views,
    select_tau,
    stack_moments,
    write_trace_csv,
)
from robust_ate.robust_outcome import PsiConfig


def sparse_dataset(n, p, s, seed, signal=1.0, rho=0.0):
    """Intercept plus ``p - 1`` normal covariates; the first ``s`` slopes are active."""
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.standard_normal((n, p - 1))])
    beta = np.zeros(p)
    beta[1:s + 1] = signal
    beta2 = np.zeros(p)
    beta2[1:s + 1] = 0.5 * signal
    T = (rng.random(n) < 1 / (1 + np.exp(-X @ beta2))).astype(float)
    eps = rng.standard_normal(n)
    k = int(rho * n)
    if k:
        eps[:k] = 5 * rng.standard_cauchy(k)
    return validate_dataset(Dataset(X, T, X @ beta + eps)), beta, beta2


# --- SCAD -----------------------------------------------------------------


def test_scad_values():
    assert scad(0.0, 1.0) == 0.0
    assert scad_derivative(0.5, 1.0) == pytest.approx(1.0)
    assert scad_derivative(2.0, 1.0) == pytest.approx(0.6296, abs=1e-4)
    assert scad_derivative(5.0, 1.0) == 0.0
    assert scad(10.0, 1.0) == pytest.approx(0.5 * 4.7)


@given(st.floats(0, 10), st.floats(0.01, 3))
def test_scad_derivative_matches_finite_differences(t, tau):
    a = 3.7
    assume(min(abs(t - tau), abs(t - a * tau), t) > 1e-4)
    h = 1e-7
    fd = (scad(t + h, tau) - scad(t - h, tau)) / (2 * h)
    assert scad_derivative(t, tau) == pytest.approx(fd, rel=1e-5, abs=1e-7)


@given(st.floats(0.01, 3))
def test_scad_continuous_at_knots(tau):
    for knot in (tau, 3.7 * tau):
        assert scad(knot * (1 - 1e-12), tau) == pytest.approx(scad(knot * (1 + 1e-12), tau), rel=1e-9)


def test_penalty_total_sums_blocks():
    pen = PenaltyConfig(0.1, 0.2, 0.3)
    eta = np.array([1.0, 0.0, -1.0, 0.0, 0.05, 0.0])
    expected = scad(1.0, 0.1) + scad(1.0, 0.2) + scad(0.05, 0.3)
    assert pen.total(eta) == pytest.approx(expected)
    with pytest.raises(ValueError):
        PenaltyConfig(scad_a=2.0)


# --- inner EL -------------------------------------------------------------


def test_el_symmetric_rows():
    res = el_inner_solve(np.array([-1.0, 1.0]))
    assert res.lam[0] == pytest.approx(0.0, abs=1e-12)
    assert res.log_el == pytest.approx(0.0, abs=1e-12)


def test_el_closed_form_root():
    res = el_inner_solve(np.array([-1.0, 2.0]))
    assert abs(res.lam[0] - 0.25) < 1e-8
    np.testing.assert_allclose(res.weights, [1 / 1.5, 1 / 3.0], atol=1e-8)
    assert res.log_el == pytest.approx(math.log(0.75) + math.log(1.5), abs=1e-10)


def test_el_same_sign_rows_are_infeasible():
    with pytest.raises(ConvexHullViolation):
        el_inner_solve(np.array([1.0, 2.0, 3.0]))


def test_el_outside_hull_in_two_dimensions():
    rows = np.array([[1.0, 0.1], [0.5, -0.2], [2.0, 1.0], [1.5, -1.0]])
    with pytest.raises(ConvexHullViolation):
        el_inner_solve(rows)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.floats(0.0, 0.3))
def test_el_weights_and_dual_oracle(seed, m, shift):
    rng = np.random.default_rng(seed)
    n = 60
    rows = rng.standard_normal((n, m)) + shift
    res = el_inner_solve(rows)
    assert np.all(res.weights > 0)
    assert abs(res.weights.sum() - 1.0) <= 1e-10
    assert np.max(np.abs(res.weights @ rows)) <= 1e-8
    # independent route: quasi-Newton on the dual with a hard barrier
    def neg_dual(lam):
        z = 1 + rows @ lam
        return np.inf if np.any(z <= 0) else -np.sum(np.log(z))
    ref = minimize(neg_dual, np.zeros(m), method="Nelder-Mead",
                   options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 20000})
    assert res.log_el == pytest.approx(-ref.fun, abs=1e-6)
    assert res.log_el >= -ref.fun - 1e-12


def test_el_cap_stops_early():
    rows = np.array([-1.0, 2.0])
    from robust_ate.penalized_el import _CapExceeded
    with pytest.raises(_CapExceeded):
        el_inner_solve(rows, cap=1e-6)


# --- moment stack ---------------------------------------------------------


def test_stack_dimensions_and_order():
    d = validate_dataset(Dataset([[1.0], [2.0], [-1.0]], [1, 0, 1], [0.5, 0.1, 3.0]))
    b = ParameterBlocks([0.1], [0.2], [0.0], sigma=1.0, psi_threshold=1.0)
    stack = stack_moments(d, b, "identity")
    assert stack.m == 3 and stack.dim_g == 1
    # column 0: (t/pi - (1-t)/(1-pi)) x with pi = 0.5
    np.testing.assert_allclose(stack.psi_matrix[:, 0], [2.0, -4.0, -2.0])
    # column 1: treated score psi(y - 0.2 x) x
    np.testing.assert_allclose(stack.psi_matrix[:, 1], [0.3, 0.0, -1.0])
    # column 2: control score
    np.testing.assert_allclose(stack.psi_matrix[:, 2], [0.0, -0.2 * 2.0 * 0 + 2 * (0.1 - 0.2), 0.0])


def test_zero_moments_give_zero_multiplier():
    # symmetric design, exact outcomes and pi = 0.5 balance: every column has mean zero
    X = np.array([[1.0], [-1.0], [1.0], [-1.0]])
    T = np.array([1, 1, 0, 0.0])
    d = validate_dataset(Dataset(X, T, 0.7 * X[:, 0]))
    b = ParameterBlocks([0.7], [0.7], [0.0])
    stack = stack_moments(d, b, "identity")
    np.testing.assert_allclose(stack.psi_matrix[:, 1:], 0.0)
    res = el_inner_solve(stack)
    np.testing.assert_allclose(res.lam, 0.0, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["identity", "identity+square"]))
def test_stack_jacobian_matches_finite_differences(seed, kind):
    d = sparse_dataset(80, 3, 2, seed)[0]
    rng = np.random.default_rng(seed)
    eta = 0.3 * rng.standard_normal(9)
    sigma, a = 1.1, 1.4
    blocks = unstack_parameters(eta, 3, sigma, a)
    # keep residuals off the psi kink so the mean score is differentiable
    r = np.where(d.T == 1, d.Y - d.X @ blocks.beta1, d.Y - d.X @ blocks.beta0) / sigma
    assume(np.min(np.abs(np.abs(r) - a)) > 1e-4)
    stack = stack_moments(d, blocks, kind)
    fd = central_difference(
        lambda e: stack_moments(d, unstack_parameters(e, 3, sigma, a), kind).psi_matrix.mean(axis=0), eta)
    assert rel_err(stack.jacobian, fd) < 1e-5


def test_jacobian_transpose_product():
    d = sparse_dataset(50, 3, 2, 0)[0]
    stack = stack_moments(d, unstack_parameters(0.2 * np.ones(9), 3, 1.0, 1.5))
    lam = np.random.default_rng(1).standard_normal(stack.m)
    np.testing.assert_allclose(stack.jacobian_t_dot(lam), d.n * stack.jacobian.T @ lam, rtol=1e-12, atol=1e-12)


# --- objective and fit ----------------------------------------------------


def test_objective_without_penalty_is_log_el(small_dataset):
    b = feasible_init(small_dataset)
    q = objective_qn(small_dataset, b, PenaltyConfig())
    assert q == pytest.approx(el_inner_solve(stack_moments(small_dataset, b)).log_el)


def test_objective_adds_penalty(small_dataset):
    b = feasible_init(small_dataset)
    pen = PenaltyConfig.shared(0.2)
    q0 = objective_qn(small_dataset, b, PenaltyConfig())
    q = objective_qn(small_dataset, b, pen)
    assert q - q0 == pytest.approx(small_dataset.n * pen.total(stack_parameters(b)))


def test_objective_at_balanced_point_is_pure_penalty():
    X = np.array([[1.0], [-1.0], [1.0], [-1.0]])
    d = validate_dataset(Dataset(X, [1, 1, 0, 0], 0.7 * X[:, 0]))
    b = ParameterBlocks([0.7], [0.7], [0.0])
    pen = PenaltyConfig.shared(0.5)
    assert objective_qn(d, b, pen, fmap="identity") == pytest.approx(4 * pen.total(stack_parameters(b)))


def test_huge_penalty_zeroes_everything(small_dataset):
    fit = fit_penalized_el(small_dataset, PenaltyConfig.shared(1e3))
    assert len(fit.active) == 0
    np.testing.assert_array_equal(fit.eta, 0.0)


def test_unpenalized_fit_matches_z_estimator():
    rng = np.random.default_rng(5)
    n = 200
    x = rng.standard_normal((n, 1)) + 0.5
    T = (rng.random(n) < 1 / (1 + np.exp(-0.4 * x[:, 0]))).astype(float)
    Y = 1.2 * x[:, 0] + 0.3 * T * x[:, 0] + rng.standard_normal(n)
    d = validate_dataset(Dataset(x, T, Y))
    fit = fit_penalized_el(d, PenaltyConfig(), fmap="identity")
    sigma, a = fit.blocks.sigma, fit.blocks.psi_threshold

    def mean_psi(eta):
        return stack_moments(d, unstack_parameters(eta, 1, sigma, a), "identity").psi_matrix.mean(axis=0)

    sol = root(mean_psi, fit.eta + 0.05, method="hybr", options={"xtol": 1e-13})
    assert sol.success
    np.testing.assert_allclose(fit.eta, sol.x, atol=1e-3)
    assert fit.log_el == pytest.approx(0.0, abs=1e-6)


def test_fit_is_local_minimum():
    d = sparse_dataset(300, 4, 2, 3)[0]
    pen = PenaltyConfig.shared(0.05)
    fit = fit_penalized_el(d, pen)
    assert fit.converged
    base = objective_qn(d, fit.blocks, pen)
    assert base == pytest.approx(fit.objective, rel=1e-10)
    for j in range(fit.eta.size):
        for sgn in (1.0, -1.0):
            e = fit.eta.copy()
            e[j] += sgn * 0.01
            b = unstack_parameters(e, d.p, fit.blocks.sigma, fit.blocks.psi_threshold)
            try:
                q = objective_qn(d, b, pen)
            except ConvexHullViolation:
                continue
            assert q >= base - 1e-6


def test_fit_is_deterministic(small_dataset, tmp_path):
    pen = PenaltyConfig.shared(0.05)
    a = fit_penalized_el(small_dataset, pen)
    b = fit_penalized_el(small_dataset, pen)
    np.testing.assert_array_equal(a.eta, b.eta)
    write_trace_csv(tmp_path / "a.csv", a)
    write_trace_csv(tmp_path / "b.csv", b)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_fixed_tuning_is_respected(small_dataset):
    fit = fit_penalized_el(small_dataset, PenaltyConfig(), PsiConfig(threshold=1.345, scale=1.0))
    assert (fit.blocks.sigma, fit.blocks.psi_threshold) == (1.0, 1.345)


def test_sign_pattern_recovery():
    hits = 0
    for seed in range(20):
        d, beta, beta2 = sparse_dataset(500, 3, 1, 100 + seed)
        fit = select_tau(d).fit
        ok = all(np.array_equal(np.sign(fit.blocks.block(k)[1:]), np.sign(b[1:]))
                 for k, b in ((0, beta), (1, beta + 0.0), (2, beta2)))
        hits += ok
    assert hits >= 18


# --- selector -------------------------------------------------------------


def test_single_grid_point(small_dataset):
    sel = select_tau(small_dataset, grid=[0.07])
    assert sel.taus == (0.07, 0.07, 0.07)
    assert sel.fit.tau_selected == (0.07, 0.07, 0.07)


def test_selector_scores_and_choice(small_dataset):
    sel = select_tau(small_dataset, grid=[0.01, 0.1, 1.0])
    best = min(sel.scores.values())
    assert sel.scores[sel.taus] == best


def test_selector_rejects_empty_grid(small_dataset):
    with pytest.raises(ValueError):
        select_tau(small_dataset, grid=[])


def test_selector_all_infeasible():
    d = validate_dataset(Dataset(np.array([[1.0], [2.0], [3.0]]), [1, 0, 1], [1.0, 2.0, 3.0]))
    with pytest.raises((AllInfeasible, ConvexHullViolation)):
        select_tau(d, grid=[0.1], init=ParameterBlocks([100.0], [100.0], [100.0]))


def test_default_grid_scale():
    g = default_tau_grid(100, 10)
    assert g[3] == pytest.approx(math.sqrt(math.log(30) / 100))
    assert list(g) == sorted(g)


@pytest.mark.slow
def test_pure_noise_selects_small_models():
    small = 0
    for seed in range(50):
        d = sparse_dataset(200, 10, 0, 1000 + seed)[0]
        fit = select_tau(d).fit
        slopes = [fit.blocks.block(k)[1:] for k in range(3)]
        small += sum(int(np.count_nonzero(b)) for b in slopes) <= 2
    assert small >= 40


# --- screening ------------------------------------------------------------


def test_screen_keeps_informative_columns():
    rng = np.random.default_rng(0)
    n = 200
    X = rng.standard_normal((n, 30))
    T = (X[:, 3] + 0.3 * rng.standard_normal(n) > 0).astype(float)
    Y = 3 * X[:, 7] + 0.1 * rng.standard_normal(n)
    Y[:20] += 1e4  # heavy outliers do not disturb rank screening
    d = validate_dataset(Dataset(X, T, Y))
    screened, (S0, S1, S2) = screen_views(d, k=2)
    assert 7 in S0 and 7 in S1 and 3 in S2
    assert screened.p == 2
    np.testing.assert_array_equal(screened.X1, X[:, S1])


def test_default_screen_size():
    assert default_screen_size(40) == 2
    assert default_screen_size(10) == 1
