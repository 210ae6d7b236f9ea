"""Doubly robust ATE from fitted nuisances, its gradient and sandwich variance.

With ``m_k(x) = x . beta_k`` and ``pi(x)`` the clipped logistic propensity,

    mu1 = mean[m1 + T (Y - m1) / pi]
    mu0 = mean[m0 + (1 - T) (Y - m0) / (1 - pi)]

and the ATE is ``mu1 - mu0``. The variance treats the ATE as one more
estimating equation ``phi_i(eta) - theta = 0`` stacked under the moment
system, with ``eta`` determined by the moment block alone. The sandwich
then picks up both the spread of the per-unit contributions ``phi_i`` and
the estimation error in ``eta``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .cbps import fit_logistic
from .data_model import ActiveSet, Dataset, ParameterBlocks
from .exceptions import AllInfeasible, ConvexHullViolation, ShapeMismatch, SingularBread
from .penalized_el import (
    DEFAULT_CLIP,
    FitResult,
    PenaltyConfig,
    default_screen_size,
    fit_penalized_el,
    screen_views,
    select_tau,
    stack_moments,
)
from .robust_outcome import PsiConfig

__all__ = [
    "AteResult",
    "ProposedEstimate",
    "SandwichParts",
    "aipw_baseline",
    "dr_ate",
    "dr_ate_from_nuisances",
    "dr_contributions",
    "estimate_proposed",
    "gmm_bread",
    "grad_h",
    "nuisance_term_variance",
    "sandwich_parts",
    "sandwich_variance",
]


@dataclass(frozen=True)
class AteResult:
    ate: float
    mu1_dr: float
    mu0_dr: float
    variance: float
    n_effective: int
    pi_min: float
    pi_max: float
    variance_method: str = "sandwich"


def dr_contributions(T, Y, pi, m1, m0):
    """Per-unit terms ``(phi1_i, phi0_i)`` whose means are ``mu1, mu0``."""
    T = np.asarray(T, dtype=float)
    Y = np.asarray(Y, dtype=float)
    phi1 = m1 + T * (Y - m1) / pi
    phi0 = m0 + (1.0 - T) * (Y - m0) / (1.0 - pi)
    return phi1, phi0


def dr_ate_from_nuisances(T, Y, pi, m1, m0) -> tuple[float, float]:
    """``(mu1, mu0)`` for arbitrary nuisance values."""
    phi1, phi0 = dr_contributions(T, Y, pi, m1, m0)
    return float(np.mean(phi1)), float(np.mean(phi0))


def _nuisances(dataset: Dataset, blocks: ParameterBlocks, clip_eps):
    z = dataset.X2 @ blocks.beta2
    pi = np.clip(expit(z), clip_eps, 1.0 - clip_eps)
    return pi, dataset.X1 @ blocks.beta1, dataset.X0 @ blocks.beta0


def _result(dataset, pi, m1, m0, variance, method, clip_eps):
    mu1, mu0 = dr_ate_from_nuisances(dataset.T, dataset.Y, pi, m1, m0)
    inside = (pi > clip_eps) & (pi < 1.0 - clip_eps)
    return AteResult(
        ate=mu1 - mu0,
        mu1_dr=mu1,
        mu0_dr=mu0,
        variance=max(float(variance), 0.0),
        n_effective=int(inside.sum()),
        pi_min=float(pi.min()),
        pi_max=float(pi.max()),
        variance_method=method,
    )


def grad_h(dataset: Dataset, blocks: ParameterBlocks, active: ActiveSet | None = None,
           clip_eps: float = DEFAULT_CLIP) -> np.ndarray:
    """Gradient of ``mu1 - mu0`` in ``eta``, restricted to ``active``.

    Coordinates are in stacking order ``(beta0, beta1, beta2)``. The
    propensity block uses ``dpi/dz = pi (1 - pi)`` at the clipped ``pi``.
    """
    T, Y = dataset.T, dataset.Y
    pi, m1, m0 = _nuisances(dataset, blocks, clip_eps)
    n = dataset.n
    g0 = (((1.0 - T) / (1.0 - pi) - 1.0) @ dataset.X0) / n
    g1 = ((1.0 - T / pi) @ dataset.X1) / n
    dphi_dpi = -T * (Y - m1) / pi**2 - (1.0 - T) * (Y - m0) / (1.0 - pi) ** 2
    g2 = ((dphi_dpi * pi * (1.0 - pi)) @ dataset.X2) / n
    full = np.concatenate([g0, g1, g2])
    if active is None:
        return full
    return full[active.stacked_indices(dataset.p)]


@dataclass(frozen=True, eq=False)
class SandwichParts:
    """Moment Jacobian ``R_n`` over active coordinates, second-moment matrix
    ``S_n`` and ``grad_h``; ``phi`` holds the per-unit ATE contributions."""

    R_n: np.ndarray
    S_n: np.ndarray
    grad_h: np.ndarray
    psi_matrix: np.ndarray = field(repr=False)
    phi: np.ndarray = field(repr=False)

    @property
    def theta(self) -> float:
        return float(np.mean(self.phi))

    def augmented(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-unit rows and mean Jacobian of the system with
        ``phi_i - theta`` appended; the last parameter is ``theta``."""
        m, q = self.R_n.shape
        rows = np.hstack([self.psi_matrix, (self.phi - self.theta)[:, None]])
        G = np.zeros((m + 1, q + 1))
        G[:m, :q] = self.R_n
        G[m, :q] = self.grad_h
        G[m, q] = -1.0
        return rows, G

    def bread(self) -> np.ndarray:
        """Bread of the augmented system.

        ``eta`` is estimated from the ``Psi`` block alone, so its rows are
        the efficient-weighting bread of that block, and ``theta`` is the
        plain mean of ``phi``. This is ``-G^{-1}`` of :meth:`augmented`
        when the ``Psi`` block is just identified. Raises ``SingularBread``.
        """
        m, q = self.R_n.shape
        B_eta = gmm_bread(self.psi_matrix, self.R_n) if q else np.zeros((0, m))
        B = np.zeros((q + 1, m + 1))
        B[:q, :m] = B_eta
        B[q, :m] = self.grad_h @ B_eta
        B[q, m] = 1.0
        return B

    def influence(self) -> np.ndarray:
        """Per-unit influence values of the DR estimate."""
        rows, _ = self.augmented()
        return rows @ self.bread()[-1]


def sandwich_parts(dataset: Dataset, blocks: ParameterBlocks, active: ActiveSet | None = None,
                   fmap=None, clip_eps: float = DEFAULT_CLIP) -> SandwichParts:
    if active is None:
        active = ActiveSet.from_blocks(blocks)
    stack = stack_moments(dataset, blocks, fmap, clip_eps)
    idx = active.stacked_indices(dataset.p)
    pi, m1, m0 = _nuisances(dataset, blocks, clip_eps)
    phi1, phi0 = dr_contributions(dataset.T, dataset.Y, pi, m1, m0)
    Psi = stack.psi_matrix
    return SandwichParts(
        R_n=stack.jacobian[:, idx],
        S_n=Psi.T @ Psi / dataset.n,
        grad_h=grad_h(dataset, blocks, active, clip_eps),
        psi_matrix=Psi,
        phi=phi1 - phi0,
    )


def gmm_bread(rows: np.ndarray, G: np.ndarray) -> np.ndarray:
    """``-(G^T S^+ G)^{-1} G^T S^+`` with ``S = mean rows rows^T``.

    Equals ``-G^{-1}`` when ``G`` is square and invertible.

    Raises
    ------
    SingularBread
    """
    if G.shape[0] == G.shape[1] and G.size and np.linalg.cond(G) < 1e12:
        return -np.linalg.inv(G)
    n = rows.shape[0]
    S = rows.T @ rows / n
    S_pinv = np.linalg.pinv(S, hermitian=True)
    A = G.T @ S_pinv @ G
    if G.shape[1] == 0:
        return np.zeros((0, G.shape[0]))
    if np.linalg.matrix_rank(A) < A.shape[0] or np.linalg.cond(A) > 1e14:
        raise SingularBread("moment Jacobian is rank deficient on the active set")
    return -np.linalg.solve(A, G.T @ S_pinv)


def sandwich_variance(dataset: Dataset, blocks: ParameterBlocks, active: ActiveSet | None = None,
                      fmap=None, clip_eps: float = DEFAULT_CLIP, *, parts: SandwichParts | None = None,
                      ) -> float:
    """Variance of the DR estimate (already divided by ``n``).

    Raises
    ------
    SingularBread
    """
    if parts is None:
        parts = sandwich_parts(dataset, blocks, active, fmap, clip_eps)
    J = parts.influence()
    return float(np.mean(J * J)) / dataset.n


def nuisance_term_variance(parts: SandwichParts, n: int) -> float:
    """``grad_h^T R^{-1} S R^{-T} grad_h / n`` for a square ``R_n``.

    This is only the part of the variance due to estimating ``eta``; near a
    correctly specified model it is close to zero, which is why
    :func:`sandwich_variance` stacks ``phi`` into the system instead.
    """
    R, S, g = parts.R_n, parts.S_n, parts.grad_h
    if R.shape[0] != R.shape[1]:
        raise ShapeMismatch(f"R_n must be square, got {R.shape}")
    try:
        a = np.linalg.solve(R.T, g)
    except np.linalg.LinAlgError as exc:
        raise SingularBread("R_n is singular") from exc
    return float(a @ S @ a) / n


def dr_ate(dataset: Dataset, blocks: ParameterBlocks, active: ActiveSet | None = None,
           fmap=None, clip_eps: float = DEFAULT_CLIP) -> AteResult:
    """DR point estimate at ``blocks`` with its sandwich variance.

    When the bread is singular the variance falls back to the spread of the
    per-unit contributions alone and ``variance_method`` says so.
    """
    pi, m1, m0 = _nuisances(dataset, blocks, clip_eps)
    try:
        var = sandwich_variance(dataset, blocks, active, fmap, clip_eps)
        method = "sandwich"
    except SingularBread:
        phi1, phi0 = dr_contributions(dataset.T, dataset.Y, pi, m1, m0)
        var = float(np.var(phi1 - phi0)) / dataset.n
        method = "plug-in"
    return _result(dataset, pi, m1, m0, var, method, clip_eps)


def _ridge_ls(X, y, ridge):
    n, p = X.shape
    return np.linalg.solve(X.T @ X + max(n, 1) * ridge * np.eye(p), X.T @ y)


def aipw_baseline(dataset: Dataset, ridge: float = 1e-4, clip_eps: float = DEFAULT_CLIP) -> AteResult:
    """Same DR formula with maximum-likelihood logistic and least-squares
    nuisances; the variance is the plug-in ``var(phi) / n``."""
    T = dataset.T
    beta2 = fit_logistic(dataset.X2, T, ridge=ridge)
    beta1 = _ridge_ls(dataset.X1[T == 1.0], dataset.Y[T == 1.0], ridge)
    beta0 = _ridge_ls(dataset.X0[T == 0.0], dataset.Y[T == 0.0], ridge)
    pi, m1, m0 = _nuisances(dataset, ParameterBlocks(beta0, beta1, beta2), clip_eps)
    phi1, phi0 = dr_contributions(T, dataset.Y, pi, m1, m0)
    return _result(dataset, pi, m1, m0, float(np.var(phi1 - phi0)) / dataset.n, "plug-in", clip_eps)


# --------------------------------------------------------------------------
# End-to-end estimator
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ProposedEstimate:
    result: AteResult
    fit: FitResult
    dataset: Dataset
    screened: tuple | None

    @property
    def ate(self) -> float:
        return self.result.ate


def estimate_proposed(dataset: Dataset, *, grid=None, tau: float | None = None,
                      psi_cfg: PsiConfig | None = None, fmap=None, screen: int | str | None = "auto",
                      clip_eps: float = DEFAULT_CLIP) -> ProposedEstimate:
    """Screen (if needed), select the penalty, fit, and return the DR ATE.

    ``screen="auto"`` keeps ``max(1, n // 20)`` columns per block when ``p``
    exceeds that, and retries with half as many columns while the moment
    system is infeasible; an integer forces that many columns; ``None``
    disables screening. A fixed ``tau`` skips the selector.

    Raises
    ------
    ConvexHullViolation, AllInfeasible
        When no screen size gives a feasible fit.
    """
    if screen == "auto":
        k = default_screen_size(dataset.n)
        sizes = [] if dataset.p <= k else [k]
        while sizes and sizes[-1] > 1:
            sizes.append(sizes[-1] // 2)
    else:
        sizes = [] if screen is None else [int(screen)]
    if not sizes:
        return _fit_and_estimate(dataset, None, grid, tau, psi_cfg, fmap, clip_eps)
    for i, k in enumerate(sizes):
        work, kept = screen_views(dataset, k)
        try:
            return _fit_and_estimate(work, kept, grid, tau, psi_cfg, fmap, clip_eps)
        except (ConvexHullViolation, AllInfeasible):
            if i == len(sizes) - 1:
                raise


def _fit_and_estimate(work, kept, grid, tau, psi_cfg, fmap, clip_eps):
    if tau is not None:
        fit = fit_penalized_el(work, PenaltyConfig.shared(tau), psi_cfg, fmap=fmap, clip_eps=clip_eps)
    else:
        fit = select_tau(work, grid, psi_cfg, fmap, clip_eps=clip_eps).fit
    return ProposedEstimate(dr_ate(work, fit.blocks, fit.active, fmap, clip_eps), fit, work, kept)
