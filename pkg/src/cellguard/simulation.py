"""Monte Carlo evaluation harness.

Builds random correlation matrices with a fixed condition number, plants
cellwise (independent) or casewise (row-replacement) contamination of a
chosen magnitude, fits the requested estimators, and aggregates the
likelihood-ratio-test divergence between each fitted scatter and the truth.
Every replicate owns a deterministic RNG stream derived from the root seed
and the replicate index, so reports are byte-identical regardless of how
many worker processes run them.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from ._rng import derive_seed, substream
from .data import DataMatrix
from .estimators import GseConfig, em_mle, tsgs
from .exceptions import CellguardError, ConvergenceError, SingularityError
from .gyfilter import FilterConfig
from .mscale import TuningTable

__all__ = [
    "TrueModel",
    "ContaminationSpec",
    "SimConfig",
    "CellResult",
    "SimReport",
    "random_correlation",
    "contaminate_icm",
    "contaminate_thcm",
    "lrt_distance",
    "run_simulation",
]

_CN_RTOL = 0.01  # relative condition-number tolerance of the generator
_MODELS = ("clean", "icm", "thcm")


@dataclass(frozen=True)
class TrueModel:
    """Ground truth of one replicate: zero mean and a random correlation."""

    mu0: np.ndarray
    R0: np.ndarray
    cn: float

    def __post_init__(self):
        object.__setattr__(self, "mu0", np.asarray(self.mu0, dtype=float))
        object.__setattr__(self, "R0", np.asarray(self.R0, dtype=float))
        R = self.R0
        if not np.allclose(np.diag(R), 1.0, atol=1e-8):
            raise ValueError("R0 must have a unit diagonal")
        if not np.allclose(R, R.T, atol=1e-10):
            raise ValueError("R0 must be symmetric")
        w = np.linalg.eigvalsh(R)
        if w[0] <= 0.0:
            raise ValueError("R0 must be positive definite")
        if abs(w[-1] / w[0] - self.cn) > _CN_RTOL * self.cn:
            raise ValueError(
                f"condition number {w[-1] / w[0]:.4f} is not within "
                f"{_CN_RTOL:.0%} of the target {self.cn}"
            )


@dataclass(frozen=True)
class ContaminationSpec:
    """Contamination mechanism: model name, cell/case fraction, magnitude grid."""

    model: str = "none"
    eps: float = 0.0
    k: tuple = ()

    def __post_init__(self):
        if self.model not in ("none", "icm", "thcm"):
            raise ValueError(f"unknown contamination model {self.model!r}")
        if not 0.0 <= self.eps < 0.5:
            raise ValueError(f"eps must lie in [0, 0.5), got {self.eps}")


def random_correlation(p: int, cn: float, rng: np.random.Generator) -> TrueModel:
    """Random correlation matrix with condition number fixed at `cn`.

    Eigenvalues are {1, sorted U(1, cn) draws, cn}; the eigenbasis comes
    from the symmetric eigendecomposition of Y'Y with standard normal Y.
    The covariance is converted to a correlation matrix, its largest
    eigenvalue re-pinned to cn times the smallest, and the two steps repeat
    until the condition number sits within 1% of the target.
    """
    if p < 2:
        raise ValueError(f"need p >= 2, got {p}")
    if cn < 1.0:
        raise ValueError(f"condition number must be >= 1, got {cn}")
    lam = np.empty(p)
    lam[0] = 1.0
    lam[-1] = cn
    if p > 2:
        lam[1:-1] = np.sort(rng.uniform(1.0, cn, size=p - 2))
    Y = rng.standard_normal((p, p))
    _, U = np.linalg.eigh(Y.T @ Y)
    sigma = (U * lam) @ U.T

    for _ in range(100):
        scale = np.sqrt(np.diag(sigma))
        R = sigma / np.outer(scale, scale)
        R = 0.5 * (R + R.T)
        np.fill_diagonal(R, 1.0)
        w, V = np.linalg.eigh(R)
        if abs(w[-1] / w[0] - cn) <= _CN_RTOL * cn:
            return TrueModel(mu0=np.zeros(p), R0=R, cn=float(cn))
        w = w.copy()
        w[-1] = cn * w[0]
        sigma = (V * w) @ V.T
    raise ConvergenceError(
        f"correlation generator did not reach condition number {cn} in 100 iterations"
    )


def contaminate_icm(X: DataMatrix, eps: float, k: float, rng: np.random.Generator) -> DataMatrix:
    """Replace exactly floor(eps*n*p) uniformly chosen cells by the value k."""
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"eps must lie in [0, 1), got {eps}")
    count = int(math.floor(eps * X.n * X.p))
    if count == 0:
        return X
    values = X.values.copy()
    mask = X.mask.copy()
    flat = rng.choice(X.n * X.p, size=count, replace=False)
    values.flat[flat] = k
    mask.flat[flat] = True
    return DataMatrix(values, mask)


def contaminate_thcm(
    X: DataMatrix, model: TrueModel, eps: float, k: float, rng: np.random.Generator
) -> DataMatrix:
    """Replace floor(eps*n) uniformly chosen rows by k*v.

    v is the eigenvector of the smallest eigenvalue of the true scatter,
    scaled so that its squared Mahalanobis norm under the truth equals 1.
    """
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"eps must lie in [0, 1), got {eps}")
    count = int(math.floor(eps * X.n))
    if count == 0:
        return X
    w, V = np.linalg.eigh(model.R0)
    if w.size > 1 and (w[1] - w[0]) <= 1e-12 * max(1.0, w[0]):
        warnings.warn(
            "smallest eigenvalue is repeated; using the first eigenvector",
            stacklevel=2,
        )
    v = V[:, 0] * math.sqrt(w[0])
    lead = np.flatnonzero(np.abs(v) > 1e-12)
    if lead.size and v[lead[0]] < 0.0:
        v = -v  # deterministic sign convention
    rows = rng.choice(X.n, size=count, replace=False)
    values = X.values.copy()
    mask = X.mask.copy()
    values[rows] = k * v
    mask[rows] = True
    return DataMatrix(values, mask)


def lrt_distance(Sigma, Sigma0) -> float:
    """Gaussian likelihood-ratio divergence trace(S S0^-1) - log|S S0^-1| - p."""
    S = np.asarray(Sigma, dtype=float)
    S0 = np.asarray(Sigma0, dtype=float)
    if S.shape != S0.shape or S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError("Sigma and Sigma0 must be square matrices of equal size")
    p = S.shape[0]
    for name, M in (("Sigma", S), ("Sigma0", S0)):
        try:
            np.linalg.cholesky(M)
        except np.linalg.LinAlgError:
            raise SingularityError(f"{name} is not positive definite") from None
    A = np.linalg.solve(S0, S)
    value = float(np.trace(A) - np.linalg.slogdet(A)[1] - p)
    if value < -1e-8:
        raise CellguardError(f"LRT distance evaluated to {value}; inputs are inconsistent")
    return max(value, 0.0)


# ---------------------------------------------------------------------------
# Monte Carlo driver
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SimConfig:
    """Study layout for :func:`run_simulation`.

    `models` may contain "clean", "icm", "thcm".  The contaminated models
    expand to one cell per (eps, k) pair; "clean" contributes a single
    cell.  `threads` controls worker processes only -- it never changes
    the numbers.
    """

    p: int
    n: int
    models: tuple = ("clean",)
    eps: tuple = (0.1,)
    k_grid: tuple = tuple(float(k) for k in (1, *range(5, 101, 5)))
    replicates: int = 100
    cn: float = 100.0
    estimators: tuple = ("tsgs", "mle")
    seed: int = 0
    threads: int = 1
    time_fits: bool = False
    filter_alpha: float = 0.95
    gse: GseConfig = field(default_factory=GseConfig)

    def __post_init__(self):
        object.__setattr__(self, "models", tuple(self.models))
        object.__setattr__(self, "eps", tuple(float(e) for e in self.eps))
        object.__setattr__(self, "k_grid", tuple(float(k) for k in self.k_grid))
        object.__setattr__(self, "estimators", tuple(self.estimators))
        for m in self.models:
            if m not in _MODELS:
                raise ValueError(f"unknown model {m!r}")
        for est in self.estimators:
            if est not in ("tsgs", "mle"):
                raise ValueError(f"unknown estimator {est!r}")
        if self.p < 2 or self.n < 4:
            raise ValueError("need p >= 2 and n >= 4")
        if self.replicates < 1:
            raise ValueError("need at least one replicate")
        if any(not 0.0 <= e < 0.5 for e in self.eps):
            raise ValueError("eps values must lie in [0, 0.5)")

    def cells(self) -> list[tuple[str, float, float]]:
        out = []
        for m in self.models:
            if m == "clean":
                out.append(("clean", 0.0, 0.0))
            else:
                out.extend((m, e, k) for e in self.eps for k in self.k_grid)
        return out

    def echo(self) -> dict:
        """Config as echoed into reports.

        Execution-resource settings (worker count) are excluded so that
        reports are byte-identical across thread counts.
        """
        raw = asdict(self)
        raw.pop("threads")
        raw["gse"] = asdict(self.gse)
        return raw


@dataclass(frozen=True)
class CellResult:
    """Aggregated outcome of one (estimator, model, eps, k) cell."""

    estimator: str
    model: str
    eps: float
    k: float
    mean_lrt: float | None
    replicates_used: int
    failures: int
    mean_seconds: float | None = None


@dataclass(frozen=True)
class SimReport:
    """Aggregated Monte Carlo results plus the resolved configuration."""

    config: dict
    seed: int
    replicates: int
    cells: tuple
    efficiency: dict | None

    def cell(self, estimator: str, model: str, eps: float = 0.0, k: float = 0.0) -> CellResult:
        for c in self.cells:
            if (
                c.estimator == estimator
                and c.model == model
                and c.eps == eps
                and c.k == k
            ):
                return c
        raise KeyError(f"no cell for ({estimator}, {model}, {eps}, {k})")

    def max_mean_lrt(self, estimator: str, model: str, eps: float) -> float:
        vals = [
            c.mean_lrt
            for c in self.cells
            if c.estimator == estimator
            and c.model == model
            and c.eps == eps
            and c.mean_lrt is not None
        ]
        if not vals:
            raise KeyError(f"no populated cells for ({estimator}, {model}, {eps})")
        return max(vals)

    def summary(self) -> list[dict]:
        seen = []
        for c in self.cells:
            if c.model == "clean":
                continue
            key = (c.estimator, c.model, c.eps)
            if key not in seen:
                seen.append(key)
        return [
            {
                "estimator": est,
                "model": model,
                "eps": eps,
                "max_mean_lrt": self.max_mean_lrt(est, model, eps),
            }
            for est, model, eps in seen
        ]

    def to_json(self) -> str:
        payload = {
            "version": __version__,
            "seed": self.seed,
            "config": self.config,
            "replicates": self.replicates,
            "cells": [
                {k: v for k, v in asdict(c).items() if not (k == "mean_seconds" and v is None)}
                for c in self.cells
            ],
            "efficiency": self.efficiency,
            "summary": self.summary(),
        }
        return json.dumps(payload, sort_keys=True, indent=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        timed = any(c.mean_seconds is not None for c in self.cells)
        cols = ["estimator", "model", "eps", "k", "mean_lrt", "replicates_used", "failures"]
        if timed:
            cols.append("mean_seconds")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for c in self.cells:
            row = [c.estimator, c.model, repr(c.eps), repr(c.k),
                   "" if c.mean_lrt is None else repr(c.mean_lrt),
                   c.replicates_used, c.failures]
            if timed:
                row.append("" if c.mean_seconds is None else repr(c.mean_seconds))
            w.writerow(row)
        return buf.getvalue()


def _fit_one(estimator: str, X: DataMatrix, cfg: SimConfig, fit_seed: int):
    if estimator == "mle":
        return em_mle(X)
    gse_cfg = GseConfig(
        max_iter=cfg.gse.max_iter,
        tol=cfg.gse.tol,
        emve_subsamples=cfg.gse.emve_subsamples,
        emve_subsample_size=cfg.gse.emve_subsample_size,
        concentration_steps=cfg.gse.concentration_steps,
        seed=fit_seed,
    )
    est, _ = tsgs(X, FilterConfig(alpha=cfg.filter_alpha), gse_cfg)
    return est


def _replicate(args) -> list[tuple]:
    cfg, r = args
    model = random_correlation(cfg.p, cfg.cn, substream(cfg.seed, r, 0))
    L = np.linalg.cholesky(model.R0)
    clean = substream(cfg.seed, r, 1).standard_normal((cfg.n, cfg.p)) @ L.T
    base = DataMatrix(clean)
    out = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for q, (mname, eps, k) in enumerate(cfg.cells()):
            if mname == "clean":
                X = base
            elif mname == "icm":
                X = contaminate_icm(base, eps, k, substream(cfg.seed, r, 2, q))
            else:
                X = contaminate_thcm(base, model, eps, k, substream(cfg.seed, r, 2, q))
            for e_i, est_name in enumerate(cfg.estimators):
                t0 = time.perf_counter() if cfg.time_fits else 0.0
                try:
                    est = _fit_one(est_name, X, cfg, derive_seed(cfg.seed, r, 3, q, e_i))
                    value = lrt_distance(est.sigma, model.R0)
                    err = None
                except (CellguardError, np.linalg.LinAlgError) as exc:
                    value = None
                    err = f"{type(exc).__name__}: {exc}"
                seconds = time.perf_counter() - t0 if cfg.time_fits else None
                out.append((q, est_name, value, seconds, err))
    return out


def run_simulation(cfg: SimConfig) -> SimReport:
    """Run the Monte Carlo study described by `cfg`.

    Replicates are independent and may run in `cfg.threads` worker
    processes; aggregation is an ordered fold over replicate indices, so
    the report content does not depend on the worker count.
    """
    if cfg.n < 2 * cfg.p:
        warnings.warn(f"n={cfg.n} is small for p={cfg.p}; recommend n >= 2p", stacklevel=2)
    if "tsgs" in cfg.estimators:
        # warm the tuning-constant cache before forking so workers inherit it
        TuningTable.for_dimension(cfg.p)
    jobs = [(cfg, r) for r in range(cfg.replicates)]
    if cfg.threads > 1:
        with ProcessPoolExecutor(max_workers=cfg.threads) as pool:
            per_rep = list(pool.map(_replicate, jobs, chunksize=1))
    else:
        per_rep = [_replicate(j) for j in jobs]

    cells = cfg.cells()
    sums = {}
    for rep in per_rep:
        for q, est_name, value, seconds, _err in rep:
            key = (q, est_name)
            agg = sums.setdefault(key, [0.0, 0, 0, 0.0])
            if value is None:
                agg[2] += 1
            else:
                agg[0] += value
                agg[1] += 1
            if seconds is not None:
                agg[3] += seconds

    results = []
    for q, (mname, eps, k) in enumerate(cells):
        for est_name in cfg.estimators:
            total, used, failed, secs = sums.get((q, est_name), [0.0, 0, 0, 0.0])
            results.append(
                CellResult(
                    estimator=est_name,
                    model=mname,
                    eps=eps,
                    k=k,
                    mean_lrt=(total / used) if used else None,
                    replicates_used=used,
                    failures=failed,
                    mean_seconds=(secs / (used + failed)) if cfg.time_fits else None,
                )
            )

    efficiency = None
    if "clean" in cfg.models and "mle" in cfg.estimators:
        ref = next(
            c.mean_lrt for c in results if c.estimator == "mle" and c.model == "clean"
        )
        if ref is not None:
            efficiency = {}
            for est_name in cfg.estimators:
                val = next(
                    c.mean_lrt
                    for c in results
                    if c.estimator == est_name and c.model == "clean"
                )
                if val:
                    efficiency[est_name] = ref / val
    return SimReport(
        config=cfg.echo(),
        seed=cfg.seed,
        replicates=cfg.replicates,
        cells=tuple(results),
        efficiency=efficiency,
    )
