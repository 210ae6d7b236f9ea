"""Seeded synthetic designs with heavy-tailed outcome contamination.

Design A is the high-dimensional ATE benchmark: Gaussian covariates, a
logistic treatment model and two linear potential-outcome models. Design B
is the simple linear regression used to benchmark interval estimates for
the slope.

Random streams come from the counter-based Philox generator seeded through
:class:`numpy.random.SeedSequence`, so ``make_rng(master, cell, rep)`` gives
the same substream no matter which worker process draws it.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .data_model import Dataset, validate_dataset

__all__ = [
    "DesignAConfig",
    "DesignBConfig",
    "RegressionData",
    "SimulatedDataset",
    "cauchy_from_uniform",
    "contamination_count",
    "default_sparse_beta",
    "make_rng",
    "sample_cauchy",
    "simulate_design_a",
    "simulate_design_b",
    "write_dataset_csv",
]


def make_rng(seed, *keys) -> np.random.Generator:
    """Philox generator for ``(seed, *keys)``.

    ``seed`` may itself be a tuple ``(master, key1, ...)``.
    """
    if isinstance(seed, (tuple, list)):
        seed, keys = seed[0], tuple(seed[1:]) + tuple(keys)
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def contamination_count(rho: float, n: int) -> int:
    # the epsilon absorbs representation error such as 0.29 * 100 = 28.999...
    return int(math.floor(rho * n + 1e-9))


def cauchy_from_uniform(u, loc=0.0, scale=1.0):
    """Inverse Cauchy CDF."""
    return loc + scale * np.tan(np.pi * (np.asarray(u, dtype=float) - 0.5))


def sample_cauchy(loc: float, scale: float, n: int, rng: np.random.Generator) -> np.ndarray:
    if not scale > 0:
        raise ValueError("scale must be positive")
    return cauchy_from_uniform(rng.random(n), loc, scale)


def default_sparse_beta(p: int, s: int = 10, magnitude: float = 1.0) -> np.ndarray:
    """``s`` leading entries alternating ``+magnitude, -magnitude``; zeros after."""
    beta = np.zeros(p)
    s = min(s, p)
    beta[:s] = magnitude * np.where(np.arange(s) % 2 == 0, 1.0, -1.0)
    return beta


@dataclass(frozen=True)
class DesignAConfig:
    n: int
    p: int
    rho: float = 0.0
    beta0_true: tuple | None = None
    beta1_true: tuple | None = None
    beta2_true: tuple | None = None
    sparsity: int = 10
    cauchy_loc: float = 0.0
    cauchy_scale: float = 5.0
    seed: int | tuple = 0
    shared_errors: bool = False

    def __post_init__(self):
        if self.n < 2 or self.p < 1:
            raise ValueError("need n >= 2 and p >= 1")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if not self.cauchy_scale > 0:
            raise ValueError("cauchy_scale must be positive")
        for name in ("beta0_true", "beta1_true", "beta2_true"):
            b = getattr(self, name)
            if b is not None and len(b) != self.p:
                raise ValueError(f"{name} must have length p={self.p}")

    def betas(self):
        default = default_sparse_beta(self.p, self.sparsity)
        return tuple(
            default.copy() if b is None else np.asarray(b, dtype=float)
            for b in (self.beta0_true, self.beta1_true, self.beta2_true)
        )


@dataclass(frozen=True, eq=False)
class SimulatedDataset:
    dataset: Dataset
    y_potential_0: np.ndarray
    y_potential_1: np.ndarray
    true_sate: float
    contaminated_indices: np.ndarray
    betas: tuple = field(default=(), repr=False)


def simulate_design_a(cfg: DesignAConfig) -> SimulatedDataset:
    """Draw one design-A sample.

    A contaminated unit has both potential-outcome errors replaced by Cauchy
    draws, so ``Y = T Y1 + (1 - T) Y0`` still holds exactly. Raises
    ``DegenerateArm`` when every unit lands in the same arm.
    """
    rng = make_rng(cfg.seed)
    beta0, beta1, beta2 = cfg.betas()
    n = cfg.n
    X = rng.standard_normal((n, cfg.p))
    T = (rng.random(n) < expit(X @ beta2)).astype(float)
    eps0 = rng.standard_normal(n)
    eps1 = eps0.copy() if cfg.shared_errors else rng.standard_normal(n)

    k = contamination_count(cfg.rho, n)
    idx = np.sort(rng.choice(n, size=k, replace=False)) if k else np.zeros(0, dtype=int)
    if k:
        c0 = sample_cauchy(cfg.cauchy_loc, cfg.cauchy_scale, k, rng)
        c1 = c0 if cfg.shared_errors else sample_cauchy(cfg.cauchy_loc, cfg.cauchy_scale, k, rng)
        eps0[idx] = c0
        eps1[idx] = c1

    y0 = X @ beta0 + eps0
    y1 = X @ beta1 + eps1
    Y = np.where(T == 1.0, y1, y0)
    data = validate_dataset(Dataset(X, T, Y))
    return SimulatedDataset(
        dataset=data,
        y_potential_0=y0,
        y_potential_1=y1,
        true_sate=float(np.mean(y1 - y0)),
        contaminated_indices=idx,
        betas=(beta0, beta1, beta2),
    )


@dataclass(frozen=True)
class DesignBConfig:
    n: int
    beta0: float = 1.0
    beta1: float = 2.0
    sigma: float = 1.0
    rho: float = 0.0
    cauchy_loc: float = 0.0
    cauchy_scale: float = 5.0
    seed: int | tuple = 0

    def __post_init__(self):
        if self.n < 3:
            raise ValueError("need n >= 3")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if not self.cauchy_scale > 0:
            raise ValueError("cauchy_scale must be positive")


@dataclass(frozen=True, eq=False)
class RegressionData:
    x: np.ndarray
    y: np.ndarray
    contaminated_indices: np.ndarray
    beta0: float
    beta1: float

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def take(self, index) -> "RegressionData":
        index = np.asarray(index)
        return RegressionData(self.x[index], self.y[index], np.zeros(0, dtype=int),
                              self.beta0, self.beta1)


def simulate_design_b(cfg: DesignBConfig) -> RegressionData:
    rng = make_rng(cfg.seed)
    n = cfg.n
    x = rng.standard_normal(n)
    eps = cfg.sigma * rng.standard_normal(n)
    k = contamination_count(cfg.rho, n)
    idx = np.sort(rng.choice(n, size=k, replace=False)) if k else np.zeros(0, dtype=int)
    if k:
        eps[idx] = sample_cauchy(cfg.cauchy_loc, cfg.cauchy_scale, k, rng)
    y = cfg.beta0 + cfg.beta1 * x + eps
    return RegressionData(x, y, idx, cfg.beta0, cfg.beta1)


def write_dataset_csv(path, dataset: Dataset) -> None:
    """Columns ``y, t, x1..xp`` with 17 significant digits."""
    X = np.asarray(dataset.X)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["y", "t"] + [f"x{j + 1}" for j in range(X.shape[1])])
        for i in range(X.shape[0]):
            w.writerow([f"{dataset.Y[i]:.17g}", f"{int(dataset.T[i])}"]
                       + [f"{v:.17g}" for v in X[i]])
