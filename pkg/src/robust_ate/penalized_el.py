"""SCAD-penalized empirical likelihood fit of ``eta = (beta0, beta1, beta2)``.

Each unit contributes the stacked estimating function

    Psi_i = (g_i, U_{1,i}, U_{0,i})

(covariate-balancing moments, then the treated-arm and control-arm bounded
scores). For fixed ``eta`` the empirical log-likelihood ratio is profiled
through the dual problem

    L_n(eta) = max_lambda sum_i log(1 + lambda . Psi_i)

and the fit minimizes ``Q_n = L_n + n * sum_l sum_j p_tau_l(|beta_lj|)``.

The inner problem is solved by damped Newton on Owen's pseudo-logarithm.
The outer problem is a proximal Gauss-Newton iteration: SCAD is replaced by
its local linear approximation at the current iterate, ``L_n`` by the
quadratic model with gradient from the envelope theorem and curvature
``n G^T S^{-1} G``, and the resulting weighted-lasso subproblem is solved by
coordinate descent. Steps are accepted only when they decrease ``Q_n``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from .cbps import BalanceFeatureMap, _as_map, balance_features, balance_weight, balance_weight_slope, fit_logistic
from .data_model import (
    ActiveSet,
    Dataset,
    ParameterBlocks,
    stack_parameters,
    unstack_parameters,
    validate_dataset,
)
from .exceptions import (
    AllInfeasible,
    ConvexHullViolation,
    EstimationError,
    NotConverged,
    ShapeMismatch,
    SingularHessian,
)
from .robust_outcome import PsiConfig, fit_huber_regression, psi, psi_slope

__all__ = [
    "ELInnerResult",
    "FitResult",
    "MomentStack",
    "PenaltyConfig",
    "TauSelection",
    "default_tau_grid",
    "el_inner_solve",
    "feasible_init",
    "fit_penalized_el",
    "initial_blocks",
    "initial_candidates",
    "objective_qn",
    "observed_residuals",
    "scad",
    "scad_derivative",
    "default_screen_size",
    "screen_views",
    "select_tau",
    "stack_moments",
    "write_trace_csv",
]

DEFAULT_CLIP = 1e-6


# --------------------------------------------------------------------------
# SCAD
# --------------------------------------------------------------------------


def scad(t, tau, a=3.7):
    """SCAD penalty of Fan and Li, evaluated at ``t >= 0``."""
    t = np.abs(np.asarray(t, dtype=float))
    if tau == 0:
        return np.zeros_like(t)
    inner = tau * t
    middle = (2 * a * tau * t - t * t - tau * tau) / (2 * (a - 1))
    outer = np.full_like(t, 0.5 * (a + 1) * tau * tau)
    return np.where(t <= tau, inner, np.where(t <= a * tau, middle, outer))


def scad_derivative(t, tau, a=3.7):
    t = np.abs(np.asarray(t, dtype=float))
    if tau == 0:
        return np.zeros_like(t)
    return tau * np.where(t <= tau, 1.0, np.maximum(a * tau - t, 0.0) / ((a - 1) * tau))


@dataclass(frozen=True)
class PenaltyConfig:
    tau0: float = 0.0
    tau1: float = 0.0
    tau2: float = 0.0
    scad_a: float = 3.7
    zero_threshold: float = 1e-4

    def __post_init__(self):
        if not self.scad_a > 2:
            raise ValueError("scad_a must exceed 2")
        if min(self.tau0, self.tau1, self.tau2) < 0:
            raise ValueError("penalty levels must be nonnegative")

    @classmethod
    def shared(cls, tau, **kw) -> "PenaltyConfig":
        return cls(tau, tau, tau, **kw)

    @property
    def taus(self) -> tuple:
        return (self.tau0, self.tau1, self.tau2)

    def tau_vector(self, p: int) -> np.ndarray:
        return np.repeat(np.asarray(self.taus, dtype=float), p)

    def total(self, eta: np.ndarray) -> float:
        """``sum_l sum_j p_tau_l(|beta_lj|)`` (without the factor n)."""
        p = eta.size // 3
        return float(sum(np.sum(scad(eta[l * p:(l + 1) * p], tau, self.scad_a))
                         for l, tau in enumerate(self.taus)))

    def lla_weights(self, eta: np.ndarray) -> np.ndarray:
        p = eta.size // 3
        return np.concatenate([scad_derivative(eta[l * p:(l + 1) * p], tau, self.scad_a)
                               for l, tau in enumerate(self.taus)])


# --------------------------------------------------------------------------
# Moment stack
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MomentStack:
    """Rows ``Psi_i`` (columns ordered g, U1, U0) and the mean Jacobian.

    ``jacobian`` has shape ``(m, 3p)`` with columns ordered
    ``(beta0, beta1, beta2)``.
    """

    psi_matrix: np.ndarray
    jacobian: np.ndarray
    dim_g: int
    p: int
    # per-unit pieces for Jacobian-vector products
    _views: tuple = field(repr=False, default=())
    _features: np.ndarray = field(repr=False, default=None)
    _g_slope: np.ndarray = field(repr=False, default=None)
    _u_slope: tuple = field(repr=False, default=())

    @property
    def n(self) -> int:
        return self.psi_matrix.shape[0]

    @property
    def m(self) -> int:
        return self.psi_matrix.shape[1]

    def jacobian_t_dot(self, lam, weights=None) -> np.ndarray:
        """``sum_i weights_i (dPsi_i/deta)^T lam`` as a length-3p vector."""
        X0, X1, X2 = self._views
        w = np.ones(self.n) if weights is None else np.asarray(weights, dtype=float)
        p, dg = self.p, self.dim_g
        lam_g, lam_1, lam_0 = lam[:dg], lam[dg:dg + p], lam[dg + p:]
        out = np.empty(3 * p)
        out[2 * p:] = X2.T @ (w * self._g_slope * (self._features @ lam_g))
        out[p:2 * p] = X1.T @ (w * self._u_slope[1] * (X1 @ lam_1))
        out[:p] = X0.T @ (w * self._u_slope[0] * (X0 @ lam_0))
        return out


def stack_moments(dataset: Dataset, blocks: ParameterBlocks, fmap=None,
                  clip_eps: float = DEFAULT_CLIP) -> MomentStack:
    fmap = _as_map(fmap)
    X0, X1, X2 = dataset.X0, dataset.X1, dataset.X2
    n, p = X0.shape
    if blocks.p != p:
        raise ShapeMismatch(f"blocks have p={blocks.p}, dataset views have p={p}")
    T, Y = dataset.T, dataset.Y
    sigma, a = blocks.sigma, blocks.psi_threshold

    pi = np.clip(expit(X2 @ blocks.beta2), clip_eps, 1.0 - clip_eps)
    F = balance_features(X2, fmap)
    g = balance_weight(T, pi)[:, None] * F
    g_slope = balance_weight_slope(T, pi)

    scores, slopes = [], []
    for k, Xk in ((1, X1), (0, X0)):
        member = (T == k).astype(float)
        gamma = (Y - Xk @ blocks.block(k)) / sigma
        scores.append((member * psi(gamma, a) / sigma)[:, None] * Xk)
        slopes.append(-member * psi_slope(gamma, a) / sigma**2)
    psi_matrix = np.hstack([g, scores[0], scores[1]])

    dg = F.shape[1]
    jac = np.zeros((dg + 2 * p, 3 * p))
    jac[:dg, 2 * p:] = (F * g_slope[:, None]).T @ X2 / n
    jac[dg:dg + p, p:2 * p] = (X1 * slopes[0][:, None]).T @ X1 / n
    jac[dg + p:, :p] = (X0 * slopes[1][:, None]).T @ X0 / n
    return MomentStack(
        psi_matrix=psi_matrix,
        jacobian=jac,
        dim_g=dg,
        p=p,
        _views=(X0, X1, X2),
        _features=F,
        _g_slope=g_slope,
        _u_slope=(slopes[1], slopes[0]),
    )


# --------------------------------------------------------------------------
# Inner dual problem
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ELInnerResult:
    lam: np.ndarray
    log_el: float
    weights: np.ndarray
    iterations: int
    converged: bool


def _log_star(z, eps):
    """Owen's pseudo-log and its first two derivatives (C^2 at ``eps``)."""
    low = z < eps
    zs = np.where(low, eps, z)
    val = np.where(low, math.log(eps) - 1.5 + 2.0 * z / eps - 0.5 * (z / eps) ** 2, np.log(zs))
    d1 = np.where(low, 2.0 / eps - z / eps**2, 1.0 / zs)
    d2 = np.where(low, -1.0 / eps**2, -1.0 / zs**2)
    return val, d1, d2


class _CapExceeded(EstimationError):
    """The dual objective passed a caller-supplied cap (so ``L_n`` exceeds it)."""


def el_inner_solve(stack, lam0=None, tol=1e-10, max_iter=200, cap=None) -> ELInnerResult:
    """Maximize ``sum_i log*(1 + lam . Psi_i)`` over ``lam``.

    ``stack`` is a :class:`MomentStack` or an ``(n, m)`` array of rows.
    The iteration stops at ``max |mean gradient| <= tol``. Every dual value
    is a lower bound on ``L_n``, so when ``cap`` is given the solve is
    abandoned as soon as the objective exceeds it.

    Raises
    ------
    ConvexHullViolation
        When zero is not inside the convex hull of the rows (the maximizer
        runs off to infinity or sits on the pseudo-log branch).
    SingularHessian
    """
    Psi = stack.psi_matrix if isinstance(stack, MomentStack) else np.asarray(stack, dtype=float)
    if Psi.ndim == 1:
        Psi = Psi[:, None]
    n, m = Psi.shape
    eps = 1.0 / n
    lam = np.zeros(m) if lam0 is None else np.array(lam0, dtype=float)
    scale = max(float(np.max(np.abs(Psi))), 1e-300)

    val, d1, d2 = _log_star(1.0 + Psi @ lam, eps)
    obj = val.sum()
    if not np.isfinite(obj):
        lam = np.zeros(m)
        val, d1, d2 = _log_star(1.0 + Psi @ lam, eps)
        obj = val.sum()

    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        grad = Psi.T @ d1
        if np.max(np.abs(grad)) <= tol * n:
            converged = True
            break
        H = (Psi * (-d2)[:, None]).T @ Psi
        # least squares tolerates redundant moments (e.g. an intercept
        # column whose square repeats it): L_n is unchanged by them
        try:
            step = np.linalg.lstsq(H, grad, rcond=1e-13)[0]
        except np.linalg.LinAlgError as exc:
            raise SingularHessian("inner EL Hessian is singular") from exc
        if not np.all(np.isfinite(step)):
            raise SingularHessian("inner EL Hessian is singular")
        t = 1.0
        while True:
            trial = lam + t * step
            tv, t1, t2 = _log_star(1.0 + Psi @ trial, eps)
            # slack for roundoff once the ascent drops below float resolution
            if tv.sum() >= obj - 1e-13 * (1.0 + abs(obj)):
                break
            t *= 0.5
            if t < 1e-12:
                break
        if t < 1e-12:
            converged = np.max(np.abs(grad)) <= 1e3 * tol * n
            break
        lam, val, d1, d2, obj = trial, tv, t1, t2, tv.sum()
        if cap is not None and obj > cap:
            raise _CapExceeded("dual objective exceeds the cap")
        if np.max(np.abs(lam)) * scale > 1e12:
            raise ConvexHullViolation("EL multiplier diverges: zero is outside the hull")

    z = 1.0 + Psi @ lam
    if not converged:
        raise ConvexHullViolation(f"EL dual did not converge in {max_iter} iterations")
    if np.any(z < eps * (1.0 - 1e-9)):
        raise ConvexHullViolation("EL weights exceed one: zero is outside the hull")
    weights = 1.0 / (n * z)
    # at an interior optimum the weights sum to one; a runaway lam drives the
    # gradient to zero through huge z instead, with weights summing to ~0
    if abs(weights.sum() - 1.0) > 1e-6:
        raise ConvexHullViolation("EL weights do not sum to one: zero is outside the hull")
    return ELInnerResult(
        lam=lam,
        log_el=float(np.sum(np.log(z))),
        weights=weights,
        iterations=it,
        converged=True,
    )


# --------------------------------------------------------------------------
# Objective
# --------------------------------------------------------------------------


def observed_residuals(dataset: Dataset, blocks: ParameterBlocks) -> np.ndarray:
    r1 = dataset.Y - dataset.X1 @ blocks.beta1
    r0 = dataset.Y - dataset.X0 @ blocks.beta0
    return np.where(dataset.T == 1.0, r1, r0)


def objective_qn(dataset: Dataset, blocks: ParameterBlocks, penalty: PenaltyConfig,
                 psi_cfg: PsiConfig | None = None, fmap=None,
                 clip_eps: float = DEFAULT_CLIP) -> float:
    """``Q_n = L_n + n * sum(SCAD)``.

    ``sigma`` and ``a`` come from ``blocks`` unless ``psi_cfg`` asks for them
    to be re-resolved from the current residuals.
    """
    if psi_cfg is not None:
        sigma, a = psi_cfg.resolve(observed_residuals(dataset, blocks))
        blocks = blocks.replace(sigma=sigma, psi_threshold=a)
    inner = el_inner_solve(stack_moments(dataset, blocks, fmap, clip_eps))
    return inner.log_el + dataset.n * penalty.total(stack_parameters(blocks))


# --------------------------------------------------------------------------
# Outer fit
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FitResult:
    blocks: ParameterBlocks
    active: ActiveSet
    inner: ELInnerResult
    objective: float
    tau_selected: tuple
    trace: list
    converged: bool
    iterations: int
    feature_map: str = "identity+square"
    clip_eps: float = DEFAULT_CLIP

    @property
    def log_el(self) -> float:
        return self.inner.log_el

    @property
    def eta(self) -> np.ndarray:
        return stack_parameters(self.blocks)


def _ridge_ls(X, y, ridge):
    n, p = X.shape
    return np.linalg.solve(X.T @ X + max(n, 1) * ridge * np.eye(p), X.T @ y)


def initial_blocks(dataset: Dataset, psi_cfg: PsiConfig | None = None,
                   ridge: float = 1e-4) -> ParameterBlocks:
    """Logistic fit for ``beta2`` and per-arm ridge least squares for the
    outcome blocks, then ``sigma`` and ``a`` from the resulting residuals."""
    psi_cfg = psi_cfg or PsiConfig()
    T = dataset.T
    beta2 = fit_logistic(dataset.X2, T, ridge=ridge)
    treated, control = T == 1.0, T == 0.0
    beta1 = _ridge_ls(dataset.X1[treated], dataset.Y[treated], ridge)
    beta0 = _ridge_ls(dataset.X0[control], dataset.Y[control], ridge)
    return _with_tuning(dataset, ParameterBlocks(beta0, beta1, beta2), psi_cfg)


def _with_tuning(dataset, blocks, psi_cfg):
    sigma, a = psi_cfg.resolve(observed_residuals(dataset, blocks))
    return blocks.replace(sigma=sigma, psi_threshold=a)


def _bounded_arm_fit(X, y, fallback):
    try:
        return fit_huber_regression(X, y).coef
    except (EstimationError, np.linalg.LinAlgError):
        return fallback


def initial_candidates(dataset: Dataset, psi_cfg: PsiConfig | None = None, ridge: float = 1e-4):
    """Starting points in order of preference.

    The first is :func:`initial_blocks`. The next ones replace the outcome
    blocks by per-arm bounded-score fits, whose scores average to zero, and
    finally also set ``beta2 = 0``, where balance holds in expectation.
    """
    psi_cfg = psi_cfg or PsiConfig()
    first = initial_blocks(dataset, psi_cfg, ridge)
    yield first
    T = dataset.T
    beta1 = _bounded_arm_fit(dataset.X1[T == 1.0], dataset.Y[T == 1.0], first.beta1)
    beta0 = _bounded_arm_fit(dataset.X0[T == 0.0], dataset.Y[T == 0.0], first.beta0)
    yield _with_tuning(dataset, ParameterBlocks(beta0, beta1, first.beta2), psi_cfg)
    yield _with_tuning(dataset, ParameterBlocks(beta0, beta1, np.zeros(dataset.p)), psi_cfg)


def feasible_init(dataset: Dataset, psi_cfg: PsiConfig | None = None, fmap=None,
                  clip_eps: float = DEFAULT_CLIP) -> ParameterBlocks:
    """First of :func:`initial_candidates` at which the inner problem is
    feasible.

    Raises
    ------
    ConvexHullViolation
        If none of them is.
    """
    for blocks in initial_candidates(dataset, psi_cfg):
        try:
            el_inner_solve(stack_moments(dataset, blocks, fmap, clip_eps))
            return blocks
        except (ConvexHullViolation, SingularHessian):
            continue
    raise ConvexHullViolation("no starting point has zero inside the hull")


def _weighted_lasso_qp(g, H, center, weights, max_sweeps=2000, tol=1e-13):
    """Minimize ``g.(b - c) + 0.5 (b - c)^T H (b - c) + sum_j weights_j |b_j|``
    by cyclic coordinate descent."""
    b = center.copy()
    Hd = np.zeros_like(b)
    diag = np.diag(H)
    scale = 1.0 + np.max(np.abs(center))
    for _ in range(max_sweeps):
        biggest = 0.0
        for j in range(b.size):
            r = g[j] + Hd[j]
            z = b[j] - r / diag[j]
            thr = weights[j] / diag[j]
            new = math.copysign(max(abs(z) - thr, 0.0), z)
            delta = new - b[j]
            if delta != 0.0:
                Hd += H[:, j] * delta
                b[j] = new
                biggest = max(biggest, abs(delta))
        if biggest <= tol * scale:
            break
    return b


class _Problem:
    """Caches the pieces of ``Q_n`` for fixed ``sigma`` and ``a``."""

    def __init__(self, dataset, penalty, fmap, clip_eps, sigma, a):
        self.dataset = dataset
        self.penalty = penalty
        self.fmap = fmap
        self.clip_eps = clip_eps
        self.sigma = sigma
        self.a = a
        self.p = dataset.p

    def blocks(self, eta):
        return unstack_parameters(eta, self.p, self.sigma, self.a)

    def evaluate(self, eta, lam0=None, cap=None):
        stack = stack_moments(self.dataset, self.blocks(eta), self.fmap, self.clip_eps)
        pen = self.dataset.n * self.penalty.total(eta)
        inner = el_inner_solve(stack, lam0=lam0, cap=None if cap is None else cap - pen)
        return inner.log_el + pen, stack, inner

    def try_evaluate(self, eta, lam0=None, cap=None):
        """Like :meth:`evaluate`, with infeasible points mapped to ``+inf``."""
        try:
            return self.evaluate(eta, lam0, cap)
        except EstimationError:
            return math.inf, None, None


def _outer_pass(problem, eta, state, max_iter, tol, trace, pass_id, it_offset):
    n = problem.dataset.n
    q, stack, inner = state
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        z = 1.0 + stack.psi_matrix @ inner.lam
        grad = stack.jacobian_t_dot(inner.lam, 1.0 / z)
        G = stack.jacobian
        S = stack.psi_matrix.T @ stack.psi_matrix / n
        S = S + (1e-10 * np.trace(S) / S.shape[0] + 1e-300) * np.eye(S.shape[0])
        try:
            SinvG = np.linalg.solve(S, G)
        except np.linalg.LinAlgError as exc:
            raise SingularHessian("moment covariance is singular") from exc
        H = n * (G.T @ SinvG)
        H = 0.5 * (H + H.T)
        ridge = 1e-9 * max(float(np.mean(np.diag(H))), 1e-12)
        H = H + ridge * np.eye(H.shape[0])

        w = n * problem.penalty.lla_weights(eta)
        target = _weighted_lasso_qp(grad, H, eta, w)
        step = target - eta
        if np.max(np.abs(step)) < tol:
            converged = True
            break
        predicted = grad @ step + np.sum(w * (np.abs(target) - np.abs(eta)))

        t = 1.0
        accepted = False
        while t >= 1e-10:
            cand = eta + t * step
            q_new, s_new, i_new = problem.try_evaluate(cand, inner.lam, cap=q)
            if q_new <= q + 1e-4 * t * min(predicted, 0.0) and q_new <= q:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            converged = True
            break
        moved = np.max(np.abs(t * step))
        eta, q, stack, inner = cand, q_new, s_new, i_new
        p = problem.p
        trace.append({
            "iter": it_offset + it,
            "pass": pass_id,
            "Q_n": q,
            "L_n": inner.log_el,
            "max_step": moved,
            "active_beta0": int(np.count_nonzero(eta[:p])),
            "active_beta1": int(np.count_nonzero(eta[p:2 * p])),
            "active_beta2": int(np.count_nonzero(eta[2 * p:])),
            "sigma": problem.sigma,
            "a": problem.a,
        })
        if moved < tol:
            converged = True
            break
    return eta, (q, stack, inner), converged, it


def fit_penalized_el(dataset: Dataset, penalty: PenaltyConfig, psi_cfg: PsiConfig | None = None,
                     init: ParameterBlocks | None = None, fmap=None, *,
                     clip_eps: float = DEFAULT_CLIP, max_iter: int = 500, tol: float = 1e-6,
                     max_passes: int = 10, raise_on_nonconvergence: bool = False) -> FitResult:
    """Local minimizer of ``Q_n``.

    ``sigma`` and ``a`` are held fixed within a pass of the outer loop and
    re-resolved from the residuals between passes (when ``psi_cfg`` says
    ``"auto"``), until they stop changing. Coefficients below
    ``penalty.zero_threshold`` are set to exactly zero at the end, unless
    that makes the inner problem infeasible; then the unthresholded iterate
    is kept and the trace gets a row with ``pass = -1``.

    Raises
    ------
    ConvexHullViolation
        If the initial point is infeasible; re-initialize and retry.
    NotConverged
        Only when ``raise_on_nonconvergence``; otherwise the best iterate is
        returned with ``converged=False``.
    """
    psi_cfg = psi_cfg or PsiConfig()
    fmap = _as_map(fmap)
    blocks = init if init is not None else feasible_init(dataset, psi_cfg, fmap, clip_eps)
    if blocks.p != dataset.p:
        raise ShapeMismatch(f"init has p={blocks.p}, dataset has p={dataset.p}")
    eta = stack_parameters(blocks)
    sigma, a = blocks.sigma, blocks.psi_threshold
    if init is not None and (psi_cfg.scale == "auto" or psi_cfg.threshold == "auto"):
        sigma, a = psi_cfg.resolve(observed_residuals(dataset, blocks))
    else:
        if psi_cfg.scale != "auto":
            sigma = float(psi_cfg.scale)
        if psi_cfg.threshold != "auto":
            a = float(psi_cfg.threshold)

    trace: list = []
    total_it = 0
    converged = False
    lam0 = None
    for pass_id in range(max_passes):
        problem = _Problem(dataset, penalty, fmap, clip_eps, sigma, a)
        state = problem.evaluate(eta, lam0)
        remaining = max(max_iter - total_it, 1)
        eta, state, converged, it = _outer_pass(problem, eta, state, remaining, tol,
                                                trace, pass_id, total_it)
        total_it += it
        lam0 = state[2].lam
        if psi_cfg.scale != "auto" and psi_cfg.threshold != "auto":
            break
        new_sigma, new_a = psi_cfg.resolve(observed_residuals(dataset, problem.blocks(eta)))
        if abs(new_sigma - sigma) <= 1e-8 * sigma and abs(new_a - a) <= 1e-8 * a:
            break
        if total_it >= max_iter:
            converged = False
            break
        sigma, a = new_sigma, new_a
    else:
        converged = False

    problem = _Problem(dataset, penalty, fmap, clip_eps, sigma, a)
    thresholded = np.where(np.abs(eta) < penalty.zero_threshold, 0.0, eta)
    try:
        q, _, inner = problem.evaluate(thresholded, lam0)
        eta = thresholded
    except EstimationError:
        # zeroing tiny coefficients can push the origin out of the hull
        q, _, inner = problem.evaluate(eta, lam0)
        p = dataset.p
        trace.append({"iter": total_it, "pass": -1, "Q_n": q, "L_n": inner.log_el, "max_step": 0.0,
                      **{f"active_beta{k}": int(np.count_nonzero(eta[k * p:(k + 1) * p])) for k in range(3)},
                      "sigma": sigma, "a": a})
    if not converged and raise_on_nonconvergence:
        raise NotConverged(f"outer loop stopped after {total_it} iterations")
    final = problem.blocks(eta)
    return FitResult(
        blocks=final,
        active=ActiveSet.from_blocks(final),
        inner=inner,
        objective=q,
        tau_selected=penalty.taus,
        trace=trace,
        converged=converged,
        iterations=total_it,
        feature_map=fmap.kind,
        clip_eps=clip_eps,
    )


def write_trace_csv(path, fit: FitResult) -> None:
    cols = ["iter", "pass", "Q_n", "L_n", "max_step", "active_beta0", "active_beta1",
            "active_beta2", "sigma", "a"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for row in fit.trace:
            w.writerow({k: (f"{v:.17g}" if isinstance(v, float) else v) for k, v in row.items()})


# --------------------------------------------------------------------------
# Penalty selection
# --------------------------------------------------------------------------


def default_tau_grid(n: int, p: int) -> tuple:
    """Shared penalty levels on the ``sqrt(log(3p) / n)`` scale."""
    base = math.sqrt(math.log(max(3 * p, 3)) / n)
    return tuple(c * base for c in (0.125, 0.25, 0.5, 1.0, 2.0, 4.0))


@dataclass(frozen=True, eq=False)
class TauSelection:
    taus: tuple
    fit: FitResult
    scores: dict

    def __iter__(self):
        return iter(self.taus)


def select_tau(dataset: Dataset, grid=None, psi_cfg: PsiConfig | None = None, fmap=None, *,
               per_block: bool = False, init: ParameterBlocks | None = None,
               **fit_kw) -> TauSelection:
    """Pick penalty levels by ``2 L_n + df log n`` over ``grid``.

    The same level is shared by the three blocks unless ``per_block``, in
    which case the full product grid is searched. Ties go to the sparser
    model, then to the larger penalty.

    Raises
    ------
    AllInfeasible
        If every grid point fails.
    """
    if grid is None:
        grid = default_tau_grid(dataset.n, dataset.p)
    grid = tuple(float(t) for t in grid)
    if not grid:
        raise ValueError("empty penalty grid")
    if per_block:
        candidates = [(a, b, c) for a in grid for b in grid for c in grid]
    else:
        candidates = [(t, t, t) for t in grid]
    psi_cfg = psi_cfg or PsiConfig()
    if init is None:
        init = feasible_init(dataset, psi_cfg, fmap, fit_kw.get("clip_eps", DEFAULT_CLIP))

    best = None
    scores = {}
    log_n = math.log(dataset.n)
    for taus in candidates:
        try:
            fit = fit_penalized_el(dataset, PenaltyConfig(*taus), psi_cfg, init, fmap, **fit_kw)
        except EstimationError:
            scores[taus] = math.inf
            continue
        df = len(fit.active)
        score = 2.0 * fit.log_el + df * log_n
        scores[taus] = score
        key = (score, df, -sum(taus))
        if best is None or key < best[0]:
            best = (key, taus, fit)
    if best is None:
        raise AllInfeasible("no penalty level on the grid gave a feasible fit")
    return TauSelection(taus=best[1], fit=best[2], scores=scores)


# --------------------------------------------------------------------------
# Screening
# --------------------------------------------------------------------------


def _abs_corr(X, v):
    Xc = X - X.mean(axis=0)
    vc = v - v.mean()
    denom = np.sqrt(np.sum(Xc * Xc, axis=0) * np.sum(vc * vc))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.abs(Xc.T @ vc) / denom
    return np.where(denom > 0, r, 0.0)


def _top(scores, k):
    # stable sort keeps the lower column index on ties
    return np.sort(np.argsort(-scores, kind="stable")[:k])


def default_screen_size(n: int) -> int:
    return max(1, n // 20)


def screen_views(dataset: Dataset, k: int | None = None) -> tuple[Dataset, tuple]:
    """Keep ``k`` columns per block by marginal association.

    The propensity view keeps the columns most correlated with ``T``; each
    outcome view keeps the columns with the largest absolute Spearman
    correlation with ``Y`` inside its own arm, which is insensitive to
    heavy-tailed outcomes. ``k`` defaults to ``max(1, n // 20)``, which
    keeps the moment count (four per kept column with the default balance
    map) at a fifth of ``n``; with more moments the empirical likelihood is
    often infeasible in small samples because zero leaves the hull.

    Returns the screened dataset and the kept column indices
    ``(S0, S1, S2)`` into ``dataset.X``.
    """
    n = dataset.n
    X = np.asarray(dataset.X)
    k = default_screen_size(n) if k is None else int(k)
    k = min(k, X.shape[1])
    keep = []
    for arm in (0.0, 1.0):
        rows = dataset.T == arm
        Xr = np.apply_along_axis(rankdata, 0, X[rows]) if rows.sum() > 1 else X[rows]
        keep.append(_top(_abs_corr(Xr, rankdata(dataset.Y[rows])), k))
    keep.append(_top(_abs_corr(X, dataset.T), k))
    S0, S1, S2 = keep
    screened = Dataset(X[:, S2], dataset.T, dataset.Y, (X[:, S0], X[:, S1], X[:, S2]))
    return validate_dataset(screened), (S0, S1, S2)
