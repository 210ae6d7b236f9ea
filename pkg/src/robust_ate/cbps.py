"""Logistic propensity model and covariate-balancing moments.

The balancing moment for one unit is

    g(t, x) = (t / pi(x) - (1 - t) / (1 - pi(x))) * f(x)

with ``f(x) = (x, x**2)`` by default. All functions accept either a single
covariate vector (shape ``(p,)``) or a matrix of rows (shape ``(n, p)``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

__all__ = [
    "BalanceFeatureMap",
    "PropensityModel",
    "balance_features",
    "balance_weight",
    "balance_weight_slope",
    "cbps_jacobian",
    "cbps_moment",
    "fit_logistic",
    "propensity",
]


@dataclass(frozen=True)
class PropensityModel:
    beta2: np.ndarray
    clip_eps: float = 1e-6

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 0.5:
            raise ValueError("clip_eps must lie in (0, 0.5)")
        object.__setattr__(self, "beta2", np.asarray(self.beta2, dtype=float))


@dataclass(frozen=True)
class BalanceFeatureMap:
    kind: str = "identity+square"

    def __post_init__(self):
        if self.kind not in ("identity+square", "identity"):
            raise ValueError(f"unknown balance map {self.kind!r}")

    def dim(self, p: int) -> int:
        return 2 * p if self.kind == "identity+square" else p


def _as_map(fmap) -> BalanceFeatureMap:
    if isinstance(fmap, BalanceFeatureMap):
        return fmap
    return BalanceFeatureMap("identity+square" if fmap is None else fmap)


def propensity(x, model: PropensityModel):
    """Clipped logistic propensity; stable for large ``|x . beta2|``."""
    z = np.asarray(x, dtype=float) @ model.beta2
    return np.clip(expit(z), model.clip_eps, 1.0 - model.clip_eps)


def balance_features(x, fmap=None):
    x = np.asarray(x, dtype=float)
    if _as_map(fmap).kind == "identity":
        return x.copy()
    return np.concatenate([x, x * x], axis=-1)


def balance_weight(t, pi):
    """``t / pi - (1 - t) / (1 - pi)``."""
    return t / pi - (1.0 - t) / (1.0 - pi)


def balance_weight_slope(t, pi):
    """Derivative of :func:`balance_weight` with respect to the linear index.

    Uses ``dpi/dz = pi (1 - pi)`` at the (possibly clipped) ``pi``, which is
    the continuous extension of the unclipped derivative.
    """
    return -(t * (1.0 - pi) / pi + (1.0 - t) * pi / (1.0 - pi))


def cbps_moment(t, x, model: PropensityModel, fmap=None):
    pi = propensity(x, model)
    w = balance_weight(np.asarray(t, dtype=float), pi)
    return np.asarray(w)[..., None] * balance_features(x, fmap)


def cbps_jacobian(t, x, model: PropensityModel, fmap=None):
    """``d g / d beta2``: shape ``(dim f, p)`` per unit."""
    x = np.asarray(x, dtype=float)
    pi = propensity(x, model)
    d = balance_weight_slope(np.asarray(t, dtype=float), pi)
    f = balance_features(x, fmap)
    return np.asarray(d)[..., None, None] * f[..., :, None] * x[..., None, :]


def fit_logistic(X, T, ridge=1e-4, max_iter=100, tol=1e-10):
    """Ridge-penalized logistic maximum likelihood by Newton's method.

    Solves ``sum_i (T_i - pi_i) X_i - n * ridge * beta = 0``; the ridge term
    keeps the solution finite under complete separation.
    """
    X = np.asarray(X, dtype=float)
    T = np.asarray(T, dtype=float)
    n, p = X.shape

    def loglik(b):
        z = X @ b
        return np.sum(T * z - np.logaddexp(0.0, z)) - 0.5 * n * ridge * (b @ b)

    beta = np.zeros(p)
    current = loglik(beta)
    for _ in range(max_iter):
        pi = expit(X @ beta)
        grad = X.T @ (T - pi) - n * ridge * beta
        W = pi * (1.0 - pi)
        H = (X * W[:, None]).T @ X + n * ridge * np.eye(p)
        step = np.linalg.solve(H, grad)
        t = 1.0
        while t > 1e-8:
            trial = loglik(beta + t * step)
            if trial >= current - 1e-12 * abs(current):
                break
            t *= 0.5
        beta = beta + t * step
        current = loglik(beta)
        if np.max(np.abs(t * step)) < tol * (1.0 + np.max(np.abs(beta))):
            break
    return beta
