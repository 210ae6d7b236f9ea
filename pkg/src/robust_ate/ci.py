"""Confidence intervals: saddlepoint-type interval from influence values,
Wald, and percentile bootstrap.

The saddlepoint interval works from the empirical cumulant generating
function of the per-unit influence values ``J_i = Psi_i^T B^T g`` of a
scalar target, where ``B`` is the bread of the M-estimation system and ``g``
the gradient of the target in the parameters. Its tail function is

    P(alpha) = Phi(-w) - exp(-n K) / sqrt(2 pi (n - 1))
               * [1 / (alpha sqrt(D)) - sign(alpha) / sqrt(2 K)]

with ``w = sign(alpha) sqrt(2 (n - 1) K(alpha))``. The upper saddlepoint
solves ``P = eps`` for ``alpha > 0`` and the lower one ``P = 1 - eps`` for
``alpha < 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import bisect
from scipy.special import logsumexp
from scipy.stats import norm

from .data_model import ActiveSet, Dataset, ParameterBlocks
from .datagen import RegressionData, make_rng
from .exceptions import (
    OverflowGuard,
    RobustATEError,
    RootNotBracketed,
    ShapeMismatch,
    SingularBread,
    TooManyFailedReplicates,
    UndefinedAtZero,
)
from .robust_outcome import HuberFit, PsiConfig, design_matrix, fit_huber_regression

__all__ = [
    "EXP_LIMIT",
    "InfluenceSystem",
    "IntervalEstimate",
    "ate_influence_system",
    "bootstrap_ci",
    "bread",
    "cgf",
    "huber_influence_system",
    "influence",
    "influence_system",
    "ols_fit",
    "proposed_ci",
    "regression_intervals",
    "tail_probability",
    "tilted_weights",
    "wald_ci",
]

EXP_LIMIT = 700.0
MODES = ("default", "literal")


# --------------------------------------------------------------------------
# Bread and influence values
# --------------------------------------------------------------------------


def bread(jacobian, rows=None) -> np.ndarray:
    """``-(mean dPsi/deta)^{-1}``.

    For a non-square (over-identified) Jacobian, ``rows`` must be given and
    the efficient-weighting generalization ``-(G^T S^+ G)^{-1} G^T S^+`` is
    returned, ``S`` being the mean outer product of ``rows``.

    Raises
    ------
    SingularBread
    """
    G = np.atleast_2d(np.asarray(jacobian, dtype=float))
    m, q = G.shape
    if m == q and rows is None:
        try:
            lu_cond = np.linalg.cond(G)
        except np.linalg.LinAlgError as exc:
            raise SingularBread("mean Jacobian is singular") from exc
        if not np.isfinite(lu_cond) or lu_cond > 1e14:
            raise SingularBread(f"mean Jacobian is singular (condition {lu_cond:.3g})")
        return -np.linalg.solve(G, np.eye(m))
    if rows is None:
        raise ShapeMismatch(f"non-square Jacobian {G.shape} needs the moment rows")
    from .ate import gmm_bread

    return gmm_bread(np.asarray(rows, dtype=float), G)


def influence(psi_matrix, bread_matrix, target_grad) -> np.ndarray:
    """``J_i = Psi_i^T B^T g`` for every row ``Psi_i``."""
    Psi = np.atleast_2d(np.asarray(psi_matrix, dtype=float))
    B = np.atleast_2d(np.asarray(bread_matrix, dtype=float))
    g = np.atleast_1d(np.asarray(target_grad, dtype=float))
    if B.shape[1] != Psi.shape[1] or B.shape[0] != g.shape[0]:
        raise ShapeMismatch(f"rows {Psi.shape}, bread {B.shape}, gradient {g.shape} do not agree")
    return Psi @ (B.T @ g)


@dataclass(frozen=True, eq=False)
class InfluenceSystem:
    psi_matrix: np.ndarray
    bread: np.ndarray
    target_grad: np.ndarray
    influence: np.ndarray
    condition: float = float("nan")

    @property
    def n(self) -> int:
        return self.influence.shape[0]


def influence_system(psi_matrix, jacobian, target_grad) -> InfluenceSystem:
    Psi = np.atleast_2d(np.asarray(psi_matrix, dtype=float))
    G = np.atleast_2d(np.asarray(jacobian, dtype=float))
    square = G.shape[0] == G.shape[1]
    B = bread(G) if square else bread(G, Psi)
    J = influence(Psi, B, target_grad)
    cond = float(np.linalg.cond(G)) if square else float("nan")
    return InfluenceSystem(Psi, B, np.asarray(target_grad, dtype=float), J, cond)


# --------------------------------------------------------------------------
# Cumulant generating function
# --------------------------------------------------------------------------


def _guard(J, t):
    if abs(t) * float(np.max(np.abs(J))) > EXP_LIMIT:
        raise OverflowGuard(f"|t| * max|J| exceeds {EXP_LIMIT} at t={t!r}")


def tilted_weights(J, t) -> np.ndarray:
    """``w_i(t) proportional to exp(t J_i)``, normalized."""
    J = np.asarray(J, dtype=float)
    _guard(J, t)
    s = t * J
    w = np.exp(s - s.max())
    return w / w.sum()


def cgf(J, t) -> tuple[float, float, float, float]:
    """``K(t) = log mean exp(t J)`` and its first three derivatives.

    Raises
    ------
    OverflowGuard
        If ``|t| * max|J| > 700``.
    """
    J = np.asarray(J, dtype=float)
    if t == 0:
        # exactly rounded sums: the third moment is often a small difference
        mean = math.fsum(J) / J.size
        d = J - mean
        return 0.0, mean, math.fsum(d * d) / J.size, math.fsum(d**3) / J.size
    _guard(J, t)
    s = t * J
    if float(np.max(np.abs(s))) < 1.0:
        # log1p/expm1 keep relative accuracy when K is close to zero
        K = math.log1p(math.fsum(np.expm1(s)) / J.size)
    else:
        K = float(logsumexp(s) - math.log(J.size))
    w = tilted_weights(J, t)
    k1 = float(w @ J)
    d = J - k1
    return K, k1, float(w @ (d * d)), float(w @ d**3)


# --------------------------------------------------------------------------
# Tail function and interval
# --------------------------------------------------------------------------


def _curvature(J, mode):
    _, _, k2, k3 = cgf(J, 0.0)
    if mode == "default":
        D = k2
    elif mode == "literal":
        D = k3
    else:
        raise ValueError(f"mode must be one of {MODES}")
    if not D > 0:
        raise UndefinedAtZero(f"curvature term is {D!r} in {mode} mode; the tail formula divides by its root")
    return D


def tail_probability(alpha, J, n=None, mode="default") -> float:
    """Saddlepoint tail function at ``alpha`` for influence values ``J``.

    ``mode="default"`` uses ``K''(0)`` in the curvature term, ``"literal"``
    uses ``K'''(0)``.

    Raises
    ------
    UndefinedAtZero
        At ``alpha = 0``, or when the curvature term is not positive.
    OverflowGuard
    """
    J = np.asarray(J, dtype=float)
    n = J.size if n is None else int(n)
    if alpha == 0:
        raise UndefinedAtZero("tail function is undefined at alpha = 0")
    D = _curvature(J, mode)
    K = cgf(J, alpha)[0]
    if not K > 0:
        raise UndefinedAtZero(f"K(alpha) = {K!r} is not positive")
    s = 1.0 if alpha > 0 else -1.0
    w = s * math.sqrt(2.0 * (n - 1) * K)
    c = math.exp(-n * K) / math.sqrt(2.0 * math.pi * (n - 1))
    return float(norm.cdf(-w) - c * (1.0 / (alpha * math.sqrt(D)) - s / math.sqrt(2.0 * K)))


@dataclass(frozen=True, eq=False)
class IntervalEstimate:
    point: float
    lower: float
    upper: float
    method: str
    level: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def length(self) -> float:
        return self.upper - self.lower

    def contains(self, value: float) -> bool:
        return self.lower <= value <= self.upper


def _solve_alpha(J, n, mode, target, sign, tol):
    """Bisection for ``P(alpha) = target`` with ``sign(alpha) = sign``."""
    sd = math.sqrt(max(cgf(J, 0.0)[2], 1e-300))
    limit = EXP_LIMIT / float(np.max(np.abs(J)))

    def f(a):
        return tail_probability(a, J, n, mode) - target

    # P runs from 1/2 near zero to 0 (alpha > 0) or 1 (alpha < 0)
    inner = min(1e-3 / (sd * math.sqrt(n)), 0.5 * limit)
    outer = min(1.0 / (sd * math.sqrt(n)), limit)
    lo_val = f(sign * inner)
    seen = [lo_val + target]
    while True:
        hi_val = f(sign * outer)
        seen.append(hi_val + target)
        if np.sign(hi_val) != np.sign(lo_val):
            break
        if outer >= limit:
            raise RootNotBracketed(target, (min(seen), max(seen)))
        inner, lo_val = outer, hi_val
        outer = min(2.0 * outer, limit)
    a, b = sorted((sign * inner, sign * outer))
    return bisect(f, a, b, xtol=tol, rtol=4 * np.finfo(float).eps, maxiter=500)


def proposed_ci(system, point: float, epsilon: float = 0.025, n: int | None = None,
                mode: str = "default", tol: float = 1e-10) -> IntervalEstimate:
    """Saddlepoint interval of nominal level ``1 - 2 epsilon``.

    ``system`` is an :class:`InfluenceSystem` or the influence values
    themselves. They are centered before use. Endpoints are
    ``point + K'(alpha)`` in default mode and ``point + K(alpha)`` in
    literal mode.

    Raises
    ------
    RootNotBracketed, UndefinedAtZero, OverflowGuard
    """
    if not 0.0 < epsilon < 0.5:
        raise ValueError("epsilon must lie in (0, 0.5)")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    J = system.influence if isinstance(system, InfluenceSystem) else np.asarray(system, dtype=float)
    J = J - J.mean()
    n = J.size if n is None else int(n)
    if not np.any(J):
        return IntervalEstimate(point, point, point, "proposed", 1.0 - 2.0 * epsilon,
                                {"alpha1": float("nan"), "alpha2": float("nan"), "mode": mode})
    a2 = _solve_alpha(J, n, mode, epsilon, 1.0, tol)
    a1 = _solve_alpha(J, n, mode, 1.0 - epsilon, -1.0, tol)
    pick = 1 if mode == "default" else 0
    lo = point + cgf(J, a1)[pick]
    hi = point + cgf(J, a2)[pick]
    return IntervalEstimate(
        point, min(lo, hi), max(lo, hi), "proposed", 1.0 - 2.0 * epsilon,
        {"alpha1": a1, "alpha2": a2, "mode": mode},
    )


def wald_ci(point: float, variance: float, level: float = 0.95) -> IntervalEstimate:
    if variance < 0:
        raise ValueError("variance must be nonnegative")
    z = float(norm.ppf(0.5 + level / 2.0))
    half = z * math.sqrt(variance)
    return IntervalEstimate(point, point - half, point + half, "wald", level, {"z": z})


def bootstrap_ci(data, estimator: Callable, level: float = 0.95, B: int = 500, seed=0,
                 point: float | None = None, max_fail: float = 0.10) -> IntervalEstimate:
    """Percentile interval from pairs resampling.

    ``data`` needs ``.n`` and ``.take(index)``; ``estimator`` maps a sample
    to a float. Replicates that raise a package error (e.g. an infeasible
    refit) are dropped and counted.

    Raises
    ------
    TooManyFailedReplicates
        If more than ``max_fail`` of the replicates fail.
    """
    if B < 50:
        raise ValueError("need at least 50 bootstrap replicates")
    rng = make_rng(seed)
    n = data.n
    stats = []
    failed = 0
    for _ in range(B):
        idx = rng.integers(0, n, size=n)
        try:
            v = float(estimator(data.take(idx)))
        except (RobustATEError, np.linalg.LinAlgError, FloatingPointError):
            failed += 1
            continue
        if not math.isfinite(v):
            failed += 1
            continue
        stats.append(v)
    if failed > max_fail * B:
        raise TooManyFailedReplicates(f"{failed} of {B} bootstrap replicates failed")
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(np.asarray(stats), [alpha, 1.0 - alpha], method="linear")
    if point is None:
        point = float(estimator(data))
    return IntervalEstimate(point, float(lo), float(hi), "bootstrap", level,
                            {"replicates": len(stats), "failed": failed})


# --------------------------------------------------------------------------
# Concrete systems
# --------------------------------------------------------------------------


def ate_influence_system(dataset: Dataset, blocks: ParameterBlocks, active: ActiveSet | None = None,
                         fmap=None, clip_eps: float = 1e-6) -> InfluenceSystem:
    """Moment system with the ATE row ``phi_i - theta`` appended; the target
    is ``theta`` itself and the bread is :meth:`SandwichParts.bread`."""
    from .ate import sandwich_parts

    parts = sandwich_parts(dataset, blocks, active, fmap, clip_eps)
    rows, G = parts.augmented()
    B = parts.bread()
    target = np.zeros(G.shape[1])
    target[-1] = 1.0
    cond = float(np.linalg.cond(G)) if G.shape[0] == G.shape[1] else float("nan")
    return InfluenceSystem(rows, B, target, influence(rows, B, target), cond)


def ols_fit(x, y):
    """Least-squares coefficients and their classical covariance."""
    Z = design_matrix(x)
    y = np.asarray(y, dtype=float)
    coef, *_ = np.linalg.lstsq(Z, y, rcond=None)
    resid = y - Z @ coef
    dof = max(y.size - Z.shape[1], 1)
    cov = float(resid @ resid) / dof * np.linalg.inv(Z.T @ Z)
    return coef, cov


def huber_influence_system(fit: HuberFit, coordinate: int = 1) -> InfluenceSystem:
    target = np.zeros(fit.coef.size)
    target[coordinate] = 1.0
    return influence_system(fit.psi_matrix, fit.jacobian, target)


def regression_intervals(data: RegressionData, methods=("proposed", "wald", "bootstrap"),
                         level: float = 0.95, B: int = 500, seed=0, mode: str = "default",
                         psi_cfg: PsiConfig | None = None) -> dict:
    """Intervals for the slope of a simple linear regression.

    The proposed interval is built on the bounded-score regression fit; Wald
    and bootstrap use ordinary least squares, the classical comparators.
    """
    out = {}
    eps = (1.0 - level) / 2.0
    if "proposed" in methods:
        fit = fit_huber_regression(data.x, data.y, psi_cfg)
        out["proposed"] = proposed_ci(huber_influence_system(fit), float(fit.coef[1]), eps, mode=mode)
    if "wald" in methods or "bootstrap" in methods:
        coef, cov = ols_fit(data.x, data.y)
        if "wald" in methods:
            out["wald"] = wald_ci(float(coef[1]), float(cov[1, 1]), level)
        if "bootstrap" in methods:
            out["bootstrap"] = bootstrap_ci(data, lambda d: ols_fit(d.x, d.y)[0][1], level, B, seed,
                                            point=float(coef[1]))
    return out
