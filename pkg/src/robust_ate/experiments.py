"""Seeded benchmark harness: ATE estimators on design A, slope intervals on
design B, and semi-synthetic analyses on expression data.

Every replication draws from its own Philox substream keyed by
``(master_seed, cell, replication)``, and results are gathered in task
order, so reports do not depend on the number of worker processes.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import subprocess
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .ate import aipw_baseline, estimate_proposed
from .ci import ate_influence_system, bootstrap_ci, proposed_ci, regression_intervals, wald_ci
from .datagen import DesignAConfig, DesignBConfig, simulate_design_a, simulate_design_b
from .exceptions import EmptyInput, RobustATEError
from .ingest import (
    generate_semisynthetic,
    load_expression_matrix,
    load_labels,
    prepare_dataset,
    random_sparse_beta,
    write_metadata,
)

__all__ = [
    "ExperimentConfig",
    "MetricsRecord",
    "compute_ci_metrics",
    "compute_metrics",
    "emit_report",
    "read_records_csv",
    "run",
    "run_ate_benchmark",
    "run_ci_benchmark",
    "run_dataset_analysis",
]

log = logging.getLogger(__name__)

KINDS = ("ate_benchmark", "ci_benchmark", "dataset_analysis")
ATE_METHODS = ("proposed", "aipw")
CI_METHODS = ("proposed", "wald", "bootstrap")

# (replications, n grid, rho grid) at desk scale and at full scale
_SCALE = {
    "ate_benchmark": {True: (100, (40, 100), (0.0, 0.2)),
                      False: (500, (20, 40, 60, 80, 100), (0.0, 0.1, 0.2))},
    "ci_benchmark": {True: (1000, (50, 100), (0.0, 0.2)),
                     False: (10000, (50, 100), (0.0, 0.1, 0.2))},
    "dataset_analysis": {True: (100, (), (0.0,)), False: (500, (), (0.0,))},
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Benchmark configuration; ``None`` grids and replication counts are
    filled from the ``scaled`` defaults. ``ci_methods`` defaults to all three
    interval methods for the CI benchmark and to proposed and Wald for
    dataset analyses."""

    kind: str
    n_grid: tuple | None = None
    rho_grid: tuple | None = None
    replications: int | None = None
    master_seed: int = 20240601
    methods: tuple = ATE_METHODS
    ci_methods: tuple | None = None
    mode: str = "default"
    level: float = 0.95
    bootstrap_B: int = 500
    p: int = 100
    sparsity: int = 10
    cauchy_loc: float = 0.0
    cauchy_scale: float = 5.0
    tau: float | None = None
    out_dir: str = "results"
    scaled: bool = True
    workers: int = 1
    dataset_name: str = ""
    expression_path: str | None = None
    labels_path: str | None = None
    treated_classes: tuple = ()
    orientation: str = "genes-in-rows"
    top_k: int = 200

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        reps, n_grid, rho_grid = _SCALE[self.kind][bool(self.scaled)]
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("replications", reps if self.replications is None else int(self.replications))
        set_("n_grid", tuple(int(v) for v in (n_grid if self.n_grid is None else self.n_grid)))
        set_("rho_grid", tuple(float(v) for v in (rho_grid if self.rho_grid is None else self.rho_grid)))
        if self.ci_methods is None:
            # bootstrapping the full estimator on every replication is slow
            set_("ci_methods", CI_METHODS if self.kind == "ci_benchmark" else ("proposed", "wald"))
        for name in ("methods", "ci_methods", "treated_classes"):
            v = getattr(self, name)
            set_(name, (v,) if isinstance(v, str) else tuple(v))
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        if self.kind != "dataset_analysis" and not self.n_grid:
            raise ValueError("n_grid must be nonempty")
        if not self.rho_grid:
            raise ValueError("rho_grid must be nonempty")
        if self.mode not in ("default", "literal"):
            raise ValueError("mode must be 'default' or 'literal'")
        if set(self.methods) - set(ATE_METHODS):
            raise ValueError(f"methods must come from {ATE_METHODS}")
        if set(self.ci_methods) - set(CI_METHODS):
            raise ValueError(f"ci_methods must come from {CI_METHODS}")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        if self.kind == "dataset_analysis" and not (self.expression_path and self.labels_path):
            raise ValueError("dataset_analysis needs expression_path and labels_path")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass(frozen=True)
class MetricsRecord:
    method: str
    n: int
    rho: float
    bias: float | None = None
    signed_bias: float | None = None
    mse: float | None = None
    mae: float | None = None
    coverage: float | None = None
    avg_length: float | None = None
    calibration_error: float | None = None
    replication_count: int = 0
    failures: int = 0


_INT_FIELDS = {"n", "replication_count", "failures"}


def compute_metrics(estimates, truths) -> tuple[float, float, float, float]:
    """``(|bias|, signed bias, mse, mae)`` of ``estimates`` against ``truths``.

    Raises
    ------
    EmptyInput
    """
    e = np.asarray(estimates, dtype=float)
    t = np.broadcast_to(np.asarray(truths, dtype=float), e.shape)
    if e.size == 0:
        raise EmptyInput("no estimates")
    err = e - t
    signed = float(np.mean(err))
    return abs(signed), signed, float(np.mean(err * err)), float(np.mean(np.abs(err)))


def compute_ci_metrics(intervals, truths, nominal: float) -> tuple[float, float, float]:
    """``(coverage, average length, |nominal - coverage|)``.

    ``intervals`` holds ``(lower, upper)`` pairs; ``truths`` is a scalar or
    one value per interval.
    """
    iv = np.asarray(intervals, dtype=float).reshape(-1, 2)
    if iv.shape[0] == 0:
        raise EmptyInput("no intervals")
    t = np.broadcast_to(np.asarray(truths, dtype=float), iv.shape[:1])
    covered = (iv[:, 0] <= t) & (t <= iv[:, 1])
    coverage = float(covered.mean())
    return coverage, float(np.mean(iv[:, 1] - iv[:, 0])), abs(nominal - coverage)


# --------------------------------------------------------------------------
# Replication workers (module level so they pickle)
# --------------------------------------------------------------------------

_FAILURES = (RobustATEError, np.linalg.LinAlgError, FloatingPointError, ValueError)


def _ate_methods(dataset, truth, methods, tau):
    out = {}
    for m in methods:
        try:
            if m == "proposed":
                est = estimate_proposed(dataset, tau=tau).ate
            elif m == "aipw":
                est = aipw_baseline(dataset).ate
            else:
                raise ValueError(f"unknown method {m!r}")
            out[m] = {"estimate": est, "truth": truth} if math.isfinite(est) else {"error": "non-finite"}
        except _FAILURES as exc:
            out[m] = {"error": type(exc).__name__}
    return out


def _ate_task(args):
    cfg, cell, n, rho, rep = args
    sim = simulate_design_a(DesignAConfig(
        n=n, p=cfg.p, rho=rho, sparsity=cfg.sparsity, cauchy_loc=cfg.cauchy_loc,
        cauchy_scale=cfg.cauchy_scale, seed=(cfg.master_seed, cell, rep),
    ))
    return _ate_methods(sim.dataset, sim.true_sate, cfg.methods, cfg.tau)


def _ci_task(args):
    cfg, cell, n, rho, rep = args
    data = simulate_design_b(DesignBConfig(
        n=n, rho=rho, cauchy_loc=cfg.cauchy_loc, cauchy_scale=cfg.cauchy_scale,
        seed=(cfg.master_seed, cell, rep),
    ))
    out = {}
    for m in cfg.ci_methods:
        try:
            iv = regression_intervals(data, (m,), cfg.level, cfg.bootstrap_B,
                                      (cfg.master_seed, cell, rep, 1), cfg.mode)[m]
            out[m] = {"estimate": iv.point, "truth": data.beta1, "lower": iv.lower, "upper": iv.upper}
        except _FAILURES as exc:
            out[m] = {"error": type(exc).__name__}
    return out


def _dataset_task(args):
    cfg, cell, prepared, betas, rep = args
    syn = generate_semisynthetic(prepared.X, prepared.T, betas[0], betas[1],
                                 seed=(cfg.master_seed, cell, rep))
    data = prepared.dataset(syn.Y)
    out = _ate_methods(data, syn.true_sate, cfg.methods, cfg.tau)
    wanted = [m for m in cfg.ci_methods if m in CI_METHODS]
    if not wanted or "proposed" not in cfg.methods:
        return out
    eps = (1.0 - cfg.level) / 2.0
    try:
        fit = estimate_proposed(data, tau=cfg.tau)
    except _FAILURES as exc:
        for m in wanted:
            out[f"ci_{m}"] = {"error": type(exc).__name__}
        return out
    for m in wanted:
        try:
            if m == "proposed":
                system = ate_influence_system(fit.dataset, fit.fit.blocks, fit.fit.active)
                iv = proposed_ci(system, fit.ate, eps, mode=cfg.mode)
            elif m == "wald":
                iv = wald_ci(fit.ate, fit.result.variance, cfg.level)
            else:
                tau = fit.fit.tau_selected[0]
                iv = bootstrap_ci(data, lambda d: estimate_proposed(d, tau=tau).ate, cfg.level,
                                  cfg.bootstrap_B, (cfg.master_seed, cell, rep, 1), point=fit.ate)
            out[f"ci_{m}"] = {"estimate": iv.point, "truth": syn.true_sate,
                              "lower": iv.lower, "upper": iv.upper}
        except _FAILURES as exc:
            out[f"ci_{m}"] = {"error": type(exc).__name__}
    return out


def _init_worker():
    # keep BLAS single-threaded inside worker processes
    threadpool_limits(1)


def _map(fn, tasks, workers):
    if workers <= 1:
        with threadpool_limits(1):
            return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker) as pool:
        return list(pool.map(fn, tasks, chunksize=max(1, len(tasks) // (8 * workers))))


def _aggregate(results, methods, n, rho, reps, nominal=None, raw=None, cell=None):
    records = []
    for m in methods:
        ok = [r[m] for r in results if "error" not in r[m]]
        failures = reps - len(ok)
        if raw is not None:
            for rep, r in enumerate(results):
                raw.append({"cell": cell, "n": n, "rho": rho, "rep": rep, "method": m, **r[m]})
        if not ok:
            records.append(MetricsRecord(m, n, rho, replication_count=0, failures=failures))
            continue
        est = [o["estimate"] for o in ok]
        truth = [o["truth"] for o in ok]
        b, sb, mse, mae = compute_metrics(est, truth)
        cov = length = cal = None
        if nominal is not None and "lower" in ok[0]:
            cov, length, cal = compute_ci_metrics([(o["lower"], o["upper"]) for o in ok], truth, nominal)
        records.append(MetricsRecord(m, n, rho, b, sb, mse, mae, cov, length, cal, len(ok), failures))
    return records


def run_ate_benchmark(cfg: ExperimentConfig, raw: list | None = None) -> list[MetricsRecord]:
    records = []
    cells = [(n, rho) for rho in cfg.rho_grid for n in cfg.n_grid]
    for cell, (n, rho) in enumerate(cells):
        tasks = [(cfg, cell, n, rho, rep) for rep in range(cfg.replications)]
        results = _map(_ate_task, tasks, cfg.workers)
        records += _aggregate(results, cfg.methods, n, rho, cfg.replications, raw=raw, cell=cell)
        log.info("ate cell n=%d rho=%g done", n, rho)
    return records


def run_ci_benchmark(cfg: ExperimentConfig, raw: list | None = None) -> list[MetricsRecord]:
    records = []
    cells = [(n, rho) for rho in cfg.rho_grid for n in cfg.n_grid]
    for cell, (n, rho) in enumerate(cells):
        tasks = [(cfg, cell, n, rho, rep) for rep in range(cfg.replications)]
        results = _map(_ci_task, tasks, cfg.workers)
        records += _aggregate(results, cfg.ci_methods, n, rho, cfg.replications, cfg.level,
                              raw=raw, cell=cell)
        log.info("ci cell n=%d rho=%g done", n, rho)
    return records


def run_dataset_analysis(cfg: ExperimentConfig, raw: list | None = None) -> tuple[list, dict]:
    """Semi-synthetic outcomes on a real covariate matrix.

    Ingestion errors propagate; per-replication failures are counted.
    """
    matrix = load_expression_matrix(cfg.expression_path, cfg.orientation)
    labels = load_labels(cfg.labels_path, cfg.treated_classes)
    prepared = prepare_dataset(matrix, labels, cfg.top_k, cfg.dataset_name)
    p = prepared.X.shape[1]
    betas = (random_sparse_beta(p, cfg.sparsity, (cfg.master_seed, 10_000, 0)),
             random_sparse_beta(p, cfg.sparsity, (cfg.master_seed, 10_000, 1)))
    meta = dict(prepared.metadata)
    meta["beta_support"] = {"beta0": np.flatnonzero(betas[0]).tolist(),
                            "beta1": np.flatnonzero(betas[1]).tolist()}
    meta["master_seed"] = cfg.master_seed
    tasks = [(cfg, 0, prepared, betas, rep) for rep in range(cfg.replications)]
    results = _map(_dataset_task, tasks, cfg.workers)
    n = prepared.X.shape[0]
    records = _aggregate(results, cfg.methods, n, 0.0, cfg.replications, raw=raw, cell=0)
    ci_keys = [f"ci_{m}" for m in cfg.ci_methods if results and f"ci_{m}" in results[0]]
    for rec in _aggregate(results, ci_keys, n, 0.0, cfg.replications, cfg.level, raw=raw, cell=0):
        records.append(rec)
    return records, meta


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, quoting=csv.QUOTE_MINIMAL, lineterminator="\r\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_records_csv(path) -> list[MetricsRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            kw = {}
            for f in fields(MetricsRecord):
                s = row[f.name]
                if f.name == "method":
                    kw[f.name] = s
                elif f.name in _INT_FIELDS:
                    kw[f.name] = int(s)
                else:
                    kw[f.name] = None if s == "" else float(s)
            out.append(MetricsRecord(**kw))
    return out


def _git_describe() -> str:
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             capture_output=True, text=True, timeout=10,
                             cwd=Path(__file__).resolve().parent)
        return res.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


_FIGURE_METRICS = {
    "ate": ("bias", "mse", "mae"),
    "ci": ("coverage", "avg_length", "calibration_error"),
}


def emit_report(records, out_dir, config: ExperimentConfig | None = None, raw: list | None = None,
                metadata: dict | None = None, formats=("csv", "json", "figures")) -> dict:
    """Write ``metrics.csv``, ``summary.json``, per-rho figure data and,
    when given, per-replication ``replications.csv``. Returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = [f.name for f in fields(MetricsRecord)]
    paths = {}
    if "csv" in formats:
        paths["metrics"] = out / "metrics.csv"
        _write_rows(paths["metrics"], names, [[getattr(r, k) for k in names] for r in records])
    if raw is not None:
        cols = ["cell", "n", "rho", "rep", "method", "estimate", "truth", "lower", "upper", "error"]
        paths["replications"] = out / "replications.csv"
        _write_rows(paths["replications"], cols, [[r.get(c) for c in cols] for r in raw])
    if "figures" in formats:
        kind = "ci" if records and records[0].coverage is not None else "ate"
        metrics = _FIGURE_METRICS[kind]
        for rho in sorted({r.rho for r in records}):
            rows = [[r.n, r.method] + [getattr(r, k) for k in metrics]
                    for r in records if r.rho == rho]
            p = out / f"figure_{kind}_rho_{rho:g}.csv"
            _write_rows(p, ["n", "method", *metrics], rows)
            paths[f"figure_rho_{rho:g}"] = p
    if "json" in formats:
        summary = {
            "config": config.to_dict() if config is not None else None,
            "git_describe": _git_describe(),
            "master_seed": config.master_seed if config is not None else None,
            "cells": len({(r.n, r.rho) for r in records}),
            "records": len(records),
        }
        if metadata:
            summary["metadata"] = metadata
        paths["summary"] = out / "summary.json"
        with open(paths["summary"], "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
    if metadata:
        paths["metadata"] = out / "metadata.json"
        write_metadata(paths["metadata"], metadata)
    return paths


def run(cfg: ExperimentConfig, out_dir=None) -> tuple[list, dict]:
    """Run the configured benchmark and write its report."""
    raw: list = []
    meta = None
    if cfg.kind == "ate_benchmark":
        records = run_ate_benchmark(cfg, raw)
    elif cfg.kind == "ci_benchmark":
        records = run_ci_benchmark(cfg, raw)
    else:
        records, meta = run_dataset_analysis(cfg, raw)
    paths = emit_report(records, out_dir or cfg.out_dir, cfg, raw, meta)
    return records, paths
