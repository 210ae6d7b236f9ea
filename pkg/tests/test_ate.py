import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_difference, linear_dataset, rel_err
from robust_ate.ate import (
    SandwichParts,
    aipw_baseline,
    dr_ate,
    dr_ate_from_nuisances,
    estimate_proposed,
    gmm_bread,
    grad_h,
    sandwich_parts,
    sandwich_variance,
)
from robust_ate.cbps import fit_logistic
from robust_ate.data_model import ActiveSet, Dataset, ParameterBlocks, unstack_parameters, validate_dataset
from robust_ate.datagen import DesignAConfig, simulate_design_a
from robust_ate.exceptions import SingularBread


def ridge_ls(X, y, ridge=1e-4):
    n, p = X.shape
    return np.linalg.solve(X.T @ X + n * ridge * np.eye(p), X.T @ y)


def test_hand_example_from_nuisances():
    mu1, mu0 = dr_ate_from_nuisances(np.array([1.0, 0.0]), np.array([2.0, 1.0]), 0.5, 0.0, 0.0)
    assert (mu1, mu0) == (2.0, 1.0)


def test_hand_example_from_blocks():
    d = validate_dataset(Dataset([[1.0], [1.0]], [1, 0], [2.0, 1.0]))
    res = dr_ate(d, ParameterBlocks([0.0], [0.0], [0.0]))
    assert (res.mu1_dr, res.mu0_dr, res.ate) == (2.0, 1.0, 1.0)
    assert res.variance >= 0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_exact_outcome_models_ignore_propensity(seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((30, 2))
    T = np.r_[1.0, 0.0, rng.integers(0, 2, 28)]
    b0, b1 = rng.standard_normal(2), rng.standard_normal(2)
    Y = np.where(T == 1, X @ b1, X @ b0)
    d = validate_dataset(Dataset(X, T, Y))
    res = dr_ate(d, ParameterBlocks(b0, b1, rng.standard_normal(2)))
    assert res.ate == pytest.approx(np.mean(X @ b1 - X @ b0), abs=1e-10)
    # and h does not move with beta2 there
    np.testing.assert_allclose(grad_h(d, ParameterBlocks(b0, b1, rng.standard_normal(2)))[4:], 0.0, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_grad_h_matches_finite_differences(seed):
    d = linear_dataset(60, 3, seed)
    rng = np.random.default_rng(seed)
    eta = 0.4 * rng.standard_normal(9)

    def h(e):
        b = unstack_parameters(e, 3)
        pi = 1 / (1 + np.exp(-d.X @ b.beta2))
        mu1, mu0 = dr_ate_from_nuisances(d.T, d.Y, pi, d.X @ b.beta1, d.X @ b.beta0)
        return mu1 - mu0

    fd = central_difference(h, eta)
    assert rel_err(grad_h(d, unstack_parameters(eta, 3)), fd) < 1e-6


def test_grad_h_hand_value():
    # pi = 0.5, T = (1, 0), x = (1, 3): d h / d beta1 = mean((1 - T/pi) x) = (-1 + 3) / 2
    d = validate_dataset(Dataset([[1.0], [3.0]], [1, 0], [0.0, 0.0]))
    g = grad_h(d, ParameterBlocks([0.0], [0.0], [0.0]))
    assert g[1] == pytest.approx(1.0)
    # d h / d beta0 = mean(((1-T)/(1-pi) - 1) x) = (-1 + 3) / 2
    assert g[0] == pytest.approx(1.0)


def test_grad_h_restricted_to_active():
    d = linear_dataset(50, 3, 0)
    b = ParameterBlocks([1.0, 0.0, 0.5], [0.0, 0.0, 1.0], [0.2, 0.0, 0.0])
    full = grad_h(d, b)
    act = ActiveSet.from_blocks(b)
    np.testing.assert_array_equal(grad_h(d, b, act), full[[0, 2, 5, 6]])


def test_zero_scores_give_zero_variance():
    n, m = 10, 3
    parts = SandwichParts(R_n=-np.eye(m), S_n=np.zeros((m, m)), grad_h=np.ones(m),
                          psi_matrix=np.zeros((n, m)), phi=np.full(n, 2.5))
    d = validate_dataset(Dataset(np.ones((n, 1)), [1, 0] * 5, np.zeros(n)))
    assert sandwich_variance(d, None, parts=parts) == 0.0


def test_bread_inverts_square_jacobian():
    rng = np.random.default_rng(0)
    G = rng.standard_normal((4, 4))
    rows = rng.standard_normal((50, 4))
    np.testing.assert_allclose(gmm_bread(rows, G) @ G, -np.eye(4), atol=1e-10)


def test_augmented_bread_is_inverse_when_just_identified():
    d = linear_dataset(300, 2, 6)
    b = ParameterBlocks([0.1, 0.9], [0.6, 1.1], [0.0, 0.2], sigma=1.0, psi_threshold=0.9)
    parts = sandwich_parts(d, b, ActiveSet.full(2), fmap="identity")
    _, G = parts.augmented()
    np.testing.assert_allclose(parts.bread(), -np.linalg.inv(G), atol=1e-10)


def test_bread_rejects_rank_deficiency():
    rows = np.random.default_rng(0).standard_normal((50, 3))
    with pytest.raises(SingularBread):
        gmm_bread(rows, np.zeros((3, 2)))


def test_sandwich_matches_plug_in_for_fixed_nuisances():
    # with no estimated coordinates the sandwich is var(phi) / n
    d = linear_dataset(300, 2, 4)
    b = ParameterBlocks([0.0, 0.0], [0.0, 0.0], [0.0, 0.0])
    parts = sandwich_parts(d, b, ActiveSet((), (), ()))
    assert sandwich_variance(d, b, parts=parts) == pytest.approx(np.var(parts.phi) / d.n, rel=1e-10)


def test_sandwich_permutation_invariant():
    d = linear_dataset(200, 2, 8)
    b = ParameterBlocks([0.1, 0.9], [0.6, 1.1], [0.0, 0.2], sigma=1.0, psi_threshold=0.7)
    perm = np.random.default_rng(0).permutation(d.n)
    v = sandwich_variance(d, b)
    assert sandwich_variance(d.take(perm), b) == pytest.approx(v, rel=1e-12)


def test_aipw_accuracy_under_correct_models():
    sim = simulate_design_a(DesignAConfig(n=2000, p=2, seed=3, beta0_true=(1.0, -1.0),
                                          beta1_true=(2.0, 0.5), beta2_true=(0.5, 0.5)))
    res = aipw_baseline(sim.dataset)
    assert abs(res.ate - sim.true_sate) < 0.1


def test_aipw_equals_dr_formula_with_same_nuisances():
    d = linear_dataset(150, 3, 1)
    T = d.T
    b = ParameterBlocks(ridge_ls(d.X[T == 0], d.Y[T == 0]), ridge_ls(d.X[T == 1], d.Y[T == 1]),
                        fit_logistic(d.X, T))
    assert aipw_baseline(d).ate == dr_ate(d, b).ate


def test_translation_equivariance():
    d = linear_dataset(150, 3, 2)
    c = 17.25
    shifted = d.with_outcome(d.Y + c)
    base, moved = aipw_baseline(d, ridge=0.0), aipw_baseline(shifted, ridge=0.0)
    assert moved.ate == pytest.approx(base.ate, abs=1e-8)
    assert moved.mu1_dr == pytest.approx(base.mu1_dr + c, abs=1e-8)
    b = ParameterBlocks([0.3, 1.0, 0.2], [0.8, 1.0, 0.9], [0.1, 0.2, 0.0])
    bc = b.replace(beta0=b.beta0 + [c, 0, 0], beta1=b.beta1 + [c, 0, 0])
    assert dr_ate(shifted, bc).ate == pytest.approx(dr_ate(d, b).ate, abs=1e-8)


def test_estimate_proposed_low_dimensional():
    d = linear_dataset(300, 3, 5)
    est = estimate_proposed(d, grid=[0.02, 0.1])
    assert est.screened is None
    assert abs(est.ate - 0.5) < 0.5
    assert est.result.variance > 0


def test_estimate_proposed_screens_wide_data():
    sim = simulate_design_a(DesignAConfig(n=60, p=40, seed=(1, 2)))
    est = estimate_proposed(sim.dataset, tau=0.1)
    S0, S1, S2 = est.screened
    assert len(S0) == len(S1) == len(S2) == 3
    assert est.dataset.p == 3
    assert np.isfinite(est.ate)
