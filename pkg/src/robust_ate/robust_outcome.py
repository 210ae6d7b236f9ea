"""Bounded-influence outcome scores for the two arm-specific linear models.

For arm ``k`` and unit ``i`` the score is

    U_{k,i} = [T_i = k] * sigma**-1 * psi((Y_i - x_i . beta_k) / sigma) * x_i

where ``psi`` clips at ``a``. Only the assigned arm's outcome is observed,
which is why units outside arm ``k`` contribute zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data_model import ParameterBlocks
from .exceptions import EmptyInput, NotConverged

__all__ = [
    "HuberFit",
    "MAD_CONSISTENCY",
    "PsiConfig",
    "design_matrix",
    "estimate_scale",
    "fit_huber_regression",
    "psi",
    "psi_slope",
    "resolve_tuning",
    "robust_score",
    "robust_score_jacobian",
]

MAD_CONSISTENCY = 0.6745
SCALE_FLOOR = 1e-6
THRESHOLD_FLOOR = 1e-3


@dataclass(frozen=True)
class PsiConfig:
    """``"auto"`` re-estimates the value from current residuals."""

    threshold: float | str = "auto"
    scale: float | str = "auto"

    def __post_init__(self):
        for name in ("threshold", "scale"):
            v = getattr(self, name)
            if isinstance(v, str):
                if v != "auto":
                    raise ValueError(f"{name} must be 'auto' or a positive number")
            elif not v > 0:
                raise ValueError(f"{name} must be positive")

    def resolve(self, residuals) -> tuple[float, float]:
        """Return ``(sigma, a)`` for the given raw residuals."""
        sigma = estimate_scale(residuals) if self.scale == "auto" else float(self.scale)
        if self.threshold == "auto":
            a = resolve_tuning(residuals, sigma)
        else:
            a = float(self.threshold)
        return sigma, a


def psi(x, a):
    """Huber-type clipping: ``x`` inside ``[-a, a]``, ``a * sign(x)`` outside."""
    return np.clip(x, -a, a)


def psi_slope(x, a):
    """``psi'``: 1 on the linear region (boundary included), 0 outside."""
    return (np.abs(x) <= a).astype(float)


def resolve_tuning(residuals, sigma=1.0) -> float:
    """``a = median(|residuals| / sigma)``, floored at 1e-3."""
    r = np.asarray(residuals, dtype=float).ravel()
    if r.size == 0:
        raise EmptyInput("no residuals")
    return max(float(np.median(np.abs(r) / sigma)), THRESHOLD_FLOOR)


def estimate_scale(residuals) -> float:
    """Normalized median absolute deviation, floored at 1e-6."""
    r = np.asarray(residuals, dtype=float).ravel()
    if r.size == 0:
        raise EmptyInput("no residuals")
    mad = np.median(np.abs(r - np.median(r)))
    return max(float(mad) / MAD_CONSISTENCY, SCALE_FLOOR)


def _arm_terms(x, y, t, k, blocks):
    x = np.asarray(x, dtype=float)
    beta = blocks.block(k)
    member = (np.asarray(t, dtype=float) == k).astype(float)
    gamma = (np.asarray(y, dtype=float) - x @ beta) / blocks.sigma
    return x, member, gamma


def robust_score(x, y, t, k, blocks: ParameterBlocks):
    """Score ``U_{k,i}``; vectorized when ``x`` is a matrix of rows."""
    x, member, gamma = _arm_terms(x, y, t, k, blocks)
    coef = member * psi(gamma, blocks.psi_threshold) / blocks.sigma
    return np.asarray(coef)[..., None] * x


def robust_score_jacobian(x, y, t, k, blocks: ParameterBlocks):
    """``d U_{k,i} / d beta_k = -[t=k] sigma**-2 1{|gamma| <= a} x x^T``."""
    x, member, gamma = _arm_terms(x, y, t, k, blocks)
    coef = -member * psi_slope(gamma, blocks.psi_threshold) / blocks.sigma**2
    return np.asarray(coef)[..., None, None] * x[..., :, None] * x[..., None, :]


def design_matrix(x) -> np.ndarray:
    """``(1, x)`` rows for a vector ``x``; a matrix is used as given."""
    x = np.asarray(x, dtype=float)
    return np.column_stack([np.ones(x.shape[0]), x]) if x.ndim == 1 else x


@dataclass(frozen=True, eq=False)
class HuberFit:
    """Bounded-score regression fit with its per-unit score rows and mean
    score Jacobian at the solution."""

    coef: np.ndarray
    sigma: float
    threshold: float
    psi_matrix: np.ndarray
    jacobian: np.ndarray
    iterations: int


def _huber_pieces(Z, y, coef, sigma, a):
    gamma = (y - Z @ coef) / sigma
    rows = (psi(gamma, a) / sigma)[:, None] * Z
    slope = psi_slope(gamma, a)
    G = -(Z * slope[:, None]).T @ Z / (sigma**2 * y.size)
    return rows, G


def _huber_loss(Z, y, coef, sigma, a):
    g = np.abs((y - Z @ coef) / sigma)
    return float(np.sum(np.where(g <= a, 0.5 * g * g, a * g - 0.5 * a * a)))


def _huber_direction(Z, y, coef, sigma, a):
    """Newton direction on the convex Huber loss, or an IRLS step when too
    few residuals sit in the linear region for the Hessian to be usable."""
    gamma = (y - Z @ coef) / sigma
    inside = np.abs(gamma) <= a
    H = (Z[inside]).T @ Z[inside]
    if inside.sum() >= Z.shape[1] and np.linalg.cond(H) < 1e12:
        return np.linalg.solve(H, Z.T @ (sigma * psi(gamma, a)))
    w = np.where(inside, 1.0, a / np.maximum(np.abs(gamma), 1e-300))
    target = np.linalg.solve((Z * w[:, None]).T @ Z, (Z * w[:, None]).T @ y)
    return target - coef


def fit_huber_regression(x, y, psi_cfg: PsiConfig | None = None, init=None, refit: bool = True,
                         tol: float = 1e-12, max_iter: int = 200, max_passes: int = 50) -> HuberFit:
    """Solve ``mean psi((y - z . b) / sigma) z / sigma = 0`` for ``b``.

    ``z = (1, x)`` for a vector ``x``. ``sigma`` and ``a`` are re-resolved
    from the residuals between Newton solves until they settle. With
    ``refit=False``, ``init`` must be a ``HuberFit`` whose coefficients and
    tuning are reused unchanged and only the rows are recomputed.
    """
    psi_cfg = psi_cfg or PsiConfig()
    Z = design_matrix(x)
    y = np.asarray(y, dtype=float)
    if not refit:
        if not isinstance(init, HuberFit):
            raise ValueError("refit=False needs a previous HuberFit as init")
        rows, G = _huber_pieces(Z, y, init.coef, init.sigma, init.threshold)
        return HuberFit(init.coef, init.sigma, init.threshold, rows, G, 0)
    if init is None:
        coef = np.linalg.lstsq(Z, y, rcond=None)[0]
    else:
        coef = np.asarray(getattr(init, "coef", init), dtype=float)
    sigma, a = psi_cfg.resolve(y - Z @ coef)
    total = 0
    for _ in range(max_passes):
        for _ in range(max_iter):
            total += 1
            step = _huber_direction(Z, y, coef, sigma, a)
            base = _huber_loss(Z, y, coef, sigma, a)
            t = 1.0
            while t > 1e-10 and _huber_loss(Z, y, coef + t * step, sigma, a) > base:
                t *= 0.5
            coef = coef + t * step
            if np.max(np.abs(t * step)) <= tol * (1.0 + np.max(np.abs(coef))):
                break
        new_sigma, new_a = psi_cfg.resolve(y - Z @ coef)
        if abs(new_sigma - sigma) <= 1e-12 * sigma and abs(new_a - a) <= 1e-12 * a:
            break
        sigma, a = new_sigma, new_a
    else:
        raise NotConverged("scale and threshold did not settle")
    rows, G = _huber_pieces(Z, y, coef, sigma, a)
    return HuberFit(coef, sigma, a, rows, G, total)
