"""Validated containers shared by the estimation modules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import (
    DegenerateArm,
    NonBinaryTreatment,
    NonFiniteValue,
    ShapeMismatch,
)

__all__ = [
    "ActiveSet",
    "Dataset",
    "ParameterBlocks",
    "stack_parameters",
    "unstack_parameters",
    "validate_dataset",
]


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observed sample ``(Y_i, T_i, X_i)``.

    ``views`` optionally holds one covariate matrix per block, ordered
    ``(outcome-control, outcome-treated, propensity)``. When absent all three
    views alias ``X``.
    """

    X: np.ndarray
    T: np.ndarray
    Y: np.ndarray
    views: tuple | None = None
    validated: bool = field(default=False, repr=False)

    @property
    def n(self) -> int:
        return int(np.shape(self.Y)[0])

    @property
    def p(self) -> int:
        return int(np.shape(self.view(0))[1])

    def view(self, k: int) -> np.ndarray:
        if self.views is None:
            return self.X
        return self.views[k]

    @property
    def X0(self) -> np.ndarray:
        return self.view(0)

    @property
    def X1(self) -> np.ndarray:
        return self.view(1)

    @property
    def X2(self) -> np.ndarray:
        return self.view(2)

    @property
    def n_treated(self) -> int:
        return int(np.sum(self.T))

    def take(self, index) -> "Dataset":
        """Rows ``index`` (with repetition allowed), as a validated dataset."""
        index = np.asarray(index)
        views = None
        if self.views is not None:
            views = tuple(v[index] for v in self.views)
        return validate_dataset(
            Dataset(self.X[index], self.T[index], self.Y[index], views)
        )

    def with_outcome(self, Y) -> "Dataset":
        return validate_dataset(Dataset(self.X, self.T, Y, self.views))


def _check_finite(name, a):
    bad = ~np.isfinite(a)
    if bad.any():
        loc = np.argwhere(bad)[0]
        raise NonFiniteValue(name, int(loc[0]), int(loc[1]) if a.ndim == 2 else None)


def validate_dataset(raw: Dataset) -> Dataset:
    """Check the structural preconditions and return an immutable copy.

    Raises
    ------
    ShapeMismatch, NonFiniteValue, NonBinaryTreatment, DegenerateArm
    """
    if raw.validated:
        return raw
    X = np.asarray(raw.X, dtype=float)
    Y = np.asarray(raw.Y, dtype=float)
    T_raw = np.asarray(raw.T)
    if X.ndim != 2:
        raise ShapeMismatch(f"X must be 2-D, got shape {X.shape}")
    if Y.ndim != 1 or T_raw.ndim != 1:
        raise ShapeMismatch("T and Y must be 1-D")
    n, p = X.shape
    if Y.shape[0] != n or T_raw.shape[0] != n:
        raise ShapeMismatch(f"X has {n} rows, T has {T_raw.shape[0]}, Y has {Y.shape[0]}")
    if n < 2 or p < 1:
        raise ShapeMismatch(f"need n >= 2 and p >= 1, got n={n}, p={p}")
    _check_finite("X", X)
    _check_finite("Y", Y)
    T_float = T_raw.astype(float)
    _check_finite("T", T_float)
    if not np.all((T_float == 0.0) | (T_float == 1.0)):
        raise NonBinaryTreatment("treatment values must be 0 or 1")
    n1 = int(T_float.sum())
    if n1 == 0 or n1 == n:
        raise DegenerateArm(f"{n1} treated out of {n}; need both arms")

    views = None
    if raw.views is not None:
        if len(raw.views) != 3:
            raise ShapeMismatch("views must be a triple (X0, X1, X2)")
        views = []
        widths = set()
        for k, V in enumerate(raw.views):
            V = np.asarray(V, dtype=float)
            if V.ndim != 2 or V.shape[0] != n:
                raise ShapeMismatch(f"view {k} has shape {V.shape}, expected ({n}, p)")
            _check_finite(f"view {k}", V)
            widths.add(V.shape[1])
            views.append(_frozen(V))
        if len(widths) != 1:
            raise ShapeMismatch(f"views have different widths {sorted(widths)}")
        views = tuple(views)

    return Dataset(_frozen(X), _frozen(T_float), _frozen(Y), views, validated=True)


@dataclass(frozen=True, eq=False)
class ParameterBlocks:
    """Coefficients ``(beta0, beta1, beta2)`` plus the outcome scale and the
    psi threshold used by the bounded scores."""

    beta0: np.ndarray
    beta1: np.ndarray
    beta2: np.ndarray
    sigma: float = 1.0
    psi_threshold: float = 1.0

    def __post_init__(self):
        b = [np.asarray(x, dtype=float).ravel() for x in (self.beta0, self.beta1, self.beta2)]
        if not (b[0].shape == b[1].shape == b[2].shape):
            raise ShapeMismatch("coefficient blocks must share one length")
        if not self.sigma > 0 or not self.psi_threshold > 0:
            raise ValueError("sigma and psi_threshold must be positive")
        for name, v in zip(("beta0", "beta1", "beta2"), b):
            object.__setattr__(self, name, _frozen(v))

    @property
    def p(self) -> int:
        return self.beta0.shape[0]

    def block(self, k: int) -> np.ndarray:
        return (self.beta0, self.beta1, self.beta2)[k]

    def replace(self, **changes) -> "ParameterBlocks":
        kw = dict(
            beta0=self.beta0,
            beta1=self.beta1,
            beta2=self.beta2,
            sigma=self.sigma,
            psi_threshold=self.psi_threshold,
        )
        kw.update(changes)
        return ParameterBlocks(**kw)


def stack_parameters(blocks: ParameterBlocks) -> np.ndarray:
    return np.concatenate([blocks.beta0, blocks.beta1, blocks.beta2])


def unstack_parameters(v, p=None, sigma=1.0, psi_threshold=1.0) -> ParameterBlocks:
    v = np.asarray(v, dtype=float).ravel()
    if p is None:
        if v.size % 3:
            raise ShapeMismatch(f"length {v.size} is not divisible by 3")
        p = v.size // 3
    if v.size != 3 * p:
        raise ShapeMismatch(f"expected length {3 * p}, got {v.size}")
    return ParameterBlocks(v[:p], v[p : 2 * p], v[2 * p :], sigma, psi_threshold)


@dataclass(frozen=True)
class ActiveSet:
    """Indices of nonzero coefficients in each block."""

    beta0: tuple
    beta1: tuple
    beta2: tuple

    def __post_init__(self):
        for name in ("beta0", "beta1", "beta2"):
            idx = tuple(int(i) for i in getattr(self, name))
            if any(b <= a for a, b in zip(idx, idx[1:])):
                raise ValueError(f"{name} indices must be strictly increasing")
            if idx and idx[0] < 0:
                raise ValueError(f"{name} indices must be nonnegative")
            object.__setattr__(self, name, idx)

    @classmethod
    def from_blocks(cls, blocks: ParameterBlocks) -> "ActiveSet":
        return cls(*(tuple(np.flatnonzero(blocks.block(k))) for k in range(3)))

    @classmethod
    def full(cls, p: int) -> "ActiveSet":
        return cls(tuple(range(p)), tuple(range(p)), tuple(range(p)))

    def stacked_indices(self, p: int) -> np.ndarray:
        """Positions in the stacked ``3p`` vector, in stacking order."""
        return np.concatenate(
            [np.asarray(self.beta0, dtype=int),
             p + np.asarray(self.beta1, dtype=int),
             2 * p + np.asarray(self.beta2, dtype=int)]
        )

    def __len__(self) -> int:
        return len(self.beta0) + len(self.beta1) + len(self.beta2)
