"""Gene-expression ingestion and semi-synthetic outcome generation.

Expression files are delimiter-separated (comma or tab, detected from the
header) with one header row of sample ids and one leading column of gene
ids, or the transpose of that when ``orientation="samples-in-rows"``.
Label files have the columns ``sample_id,class``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data_model import Dataset, validate_dataset
from .datagen import make_rng
from .exceptions import (
    EmptyMatrix,
    ParseError,
    RaggedRows,
    ShapeMismatch,
    UnknownLabel,
    ValidationError,
)

__all__ = [
    "ExpressionMatrix",
    "LabelMap",
    "PreparedData",
    "SemiSynthetic",
    "derive_treatment",
    "generate_semisynthetic",
    "load_expression_matrix",
    "load_labels",
    "prepare_dataset",
    "random_sparse_beta",
    "standardize_covariates",
    "top_variance_columns",
    "write_expression_matrix",
    "write_metadata",
]

ORIENTATIONS = ("genes-in-rows", "samples-in-rows")


@dataclass(frozen=True, eq=False)
class ExpressionMatrix:
    """``values`` is genes x samples."""

    values: np.ndarray
    gene_ids: tuple
    sample_ids: tuple

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (len(self.gene_ids), len(self.sample_ids)):
            raise ShapeMismatch(f"values {v.shape} vs {len(self.gene_ids)} genes, {len(self.sample_ids)} samples")
        object.__setattr__(self, "gene_ids", tuple(self.gene_ids))
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def samples_by_genes(self) -> np.ndarray:
        return self.values.T


def _detect_delimiter(header: str) -> str:
    return "\t" if header.count("\t") > header.count(",") else ","


def load_expression_matrix(path, orientation: str = "genes-in-rows") -> ExpressionMatrix:
    """Read an expression table and normalize it to genes x samples.

    Raises
    ------
    ParseError
        On a non-numeric or missing cell; carries the 1-based line number.
    RaggedRows
        When a row's width differs from the header's.
    EmptyMatrix
        When there are no data rows or no value columns.
    """
    if orientation not in ORIENTATIONS:
        raise ValueError(f"orientation must be one of {ORIENTATIONS}")
    path = Path(path)
    with path.open(newline="") as fh:
        header_line = fh.readline()
        if not header_line.strip():
            raise EmptyMatrix(f"{path} has no header")
        delim = _detect_delimiter(header_line)
        header = next(csv.reader([header_line], delimiter=delim))
        col_ids = [h.strip() for h in header[1:]]
        row_ids, rows = [], []
        for lineno, rec in enumerate(csv.reader(fh, delimiter=delim), start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise RaggedRows(f"line {lineno}: {len(rec)} fields, header has {len(header)}")
            vals = []
            for cell in rec[1:]:
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(lineno, f"not a number: {cell!r}") from None
                if not math.isfinite(v):
                    raise ParseError(lineno, f"missing or non-finite value: {cell!r}")
                vals.append(v)
            row_ids.append(rec[0].strip())
            rows.append(vals)
    if not rows or not col_ids:
        raise EmptyMatrix(f"{path} holds no values")
    values = np.array(rows, dtype=float)
    if orientation == "genes-in-rows":
        return ExpressionMatrix(values, row_ids, col_ids)
    return ExpressionMatrix(values.T, col_ids, row_ids)


def write_expression_matrix(path, matrix: ExpressionMatrix) -> None:
    """Genes in rows, 17 significant digits."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["gene_id", *matrix.sample_ids])
        for gid, row in zip(matrix.gene_ids, matrix.values):
            w.writerow([gid, *(f"{v:.17g}" for v in row)])


@dataclass(frozen=True)
class LabelMap:
    labels: dict
    treated_classes: frozenset

    def __post_init__(self):
        treated = frozenset(self.treated_classes)
        object.__setattr__(self, "treated_classes", treated)
        observed = set(self.labels.values())
        if not treated:
            raise ValidationError("treated_classes is empty")
        if not treated < observed:
            raise ValidationError(
                f"treated classes {sorted(treated)} must be a strict subset of {sorted(observed)}"
            )

    @property
    def classes(self) -> list:
        return sorted(set(self.labels.values()))


def load_labels(path, treated_classes) -> LabelMap:
    if isinstance(treated_classes, str):
        treated_classes = [treated_classes]
    labels = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"sample_id", "class"} <= set(reader.fieldnames):
            raise ParseError(1, "label file needs the columns sample_id,class")
        for lineno, rec in enumerate(reader, start=2):
            sid, cls = (rec.get("sample_id") or "").strip(), (rec.get("class") or "").strip()
            if not sid or not cls:
                raise ParseError(lineno, "empty sample_id or class")
            labels[sid] = cls
    return LabelMap(labels, frozenset(treated_classes))


def derive_treatment(labels: LabelMap, samples) -> np.ndarray:
    """``T_i = 1`` when sample ``i``'s class is a treated class.

    Raises
    ------
    UnknownLabel
    """
    out = np.empty(len(samples))
    for i, sid in enumerate(samples):
        if sid not in labels.labels:
            raise UnknownLabel(sid)
        out[i] = float(labels.labels[sid] in labels.treated_classes)
    return out


def standardize_covariates(X):
    """Center and scale columns to mean 0 and population sd 1.

    Constant columns are removed. Returns ``(X_std, means, sds, dropped)``
    where ``means`` and ``sds`` refer to the kept columns and ``dropped``
    lists the removed column indices.
    """
    X = np.asarray(X, dtype=float)
    means = X.mean(axis=0)
    sds = X.std(axis=0)
    const = sds <= 1e-12 * (1.0 + np.abs(means))
    keep = ~const
    X_std = (X[:, keep] - means[keep]) / sds[keep]
    return X_std, means[keep], sds[keep], np.flatnonzero(const)


def top_variance_columns(X, k: int = 200) -> np.ndarray:
    """Indices of the ``k`` highest-variance columns, in column order."""
    X = np.asarray(X, dtype=float)
    k = min(int(k), X.shape[1])
    order = np.argsort(-X.var(axis=0), kind="stable")
    return np.sort(order[:k])


def random_sparse_beta(p: int, s: int = 10, seed=0, magnitude: float = 1.0) -> np.ndarray:
    """``s`` nonzeros of size ``magnitude`` with random signs on a random support."""
    rng = make_rng(seed)
    s = min(s, p)
    beta = np.zeros(p)
    support = np.sort(rng.choice(p, size=s, replace=False))
    beta[support] = magnitude * rng.choice([-1.0, 1.0], size=s)
    return beta


@dataclass(frozen=True, eq=False)
class SemiSynthetic:
    Y: np.ndarray
    true_sate: float
    y_potential_0: np.ndarray
    y_potential_1: np.ndarray


def generate_semisynthetic(X, T, beta0, beta1, seed=0, noise: bool = True,
                           shared_noise: bool = False) -> SemiSynthetic:
    """Linear potential outcomes with standard-normal errors, observed by
    consistency. ``true_sate`` is the sample mean of ``Y1 - Y0``.

    Raises
    ------
    ShapeMismatch
    """
    X = np.asarray(X, dtype=float)
    T = np.asarray(T, dtype=float)
    beta0 = np.asarray(beta0, dtype=float)
    beta1 = np.asarray(beta1, dtype=float)
    n, p = X.shape
    if T.shape != (n,) or beta0.shape != (p,) or beta1.shape != (p,):
        raise ShapeMismatch(f"X {X.shape}, T {T.shape}, beta0 {beta0.shape}, beta1 {beta1.shape}")
    if noise:
        rng = make_rng(seed)
        e0 = rng.standard_normal(n)
        e1 = e0.copy() if shared_noise else rng.standard_normal(n)
    else:
        e0 = e1 = np.zeros(n)
    y0 = X @ beta0 + e0
    y1 = X @ beta1 + e1
    Y = np.where(T == 1.0, y1, y0)
    return SemiSynthetic(Y, float(np.mean(y1 - y0)), y0, y1)


@dataclass(frozen=True, eq=False)
class PreparedData:
    """Screened, standardized covariates (samples x k) and treatment."""

    X: np.ndarray
    T: np.ndarray
    gene_ids: tuple
    sample_ids: tuple
    metadata: dict = field(default_factory=dict)

    def dataset(self, Y) -> Dataset:
        return validate_dataset(Dataset(self.X, self.T, Y))


def prepare_dataset(matrix: ExpressionMatrix, labels: LabelMap, top_k: int | None = 200,
                    name: str = "") -> PreparedData:
    """Keep the ``top_k`` highest-variance genes (on the raw scale), then
    standardize them; ``top_k=None`` keeps every gene."""
    T = derive_treatment(labels, matrix.sample_ids)
    raw = matrix.samples_by_genes()
    cols = np.arange(raw.shape[1]) if top_k is None else top_variance_columns(raw, top_k)
    X, means, sds, dropped = standardize_covariates(raw[:, cols])
    kept_cols = np.delete(cols, dropped)
    meta = {
        "name": name,
        "n": int(raw.shape[0]),
        "p_raw": int(raw.shape[1]),
        "n_treated": int(T.sum()),
        "n_control": int(T.size - T.sum()),
        "treated_classes": sorted(labels.treated_classes),
        "screening": {"rule": "top variance", "k": None if top_k is None else int(top_k)},
        "p_used": int(X.shape[1]),
        "dropped_constant": [matrix.gene_ids[c] for c in cols[dropped]],
        "standardization": "mean 0, population sd 1",
    }
    return PreparedData(X, T, tuple(matrix.gene_ids[c] for c in kept_cols), matrix.sample_ids, meta)


def write_metadata(path, metadata: dict) -> None:
    with open(path, "w") as fh:
        json.dump(metadata, fh, indent=2, sort_keys=True)
        fh.write("\n")
