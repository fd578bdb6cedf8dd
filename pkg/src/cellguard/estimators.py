"""Location/scatter estimators for data with missing cells.

Four estimators share the masked-data machinery:

* ``em_mle``     -- classical Gaussian maximum likelihood via EM.
* ``emve_init``  -- subsampling-with-concentration high-breakdown initial
                    estimate (hard-rejection half-sample scale).
* ``gse_fit``    -- generalized S-estimator: iterative minimization of the
                    generalized M-scale of partial Mahalanobis distances.
* ``tsgs``       -- the two-step pipeline: adaptive univariate filter, then
                    ``emve_init`` + ``gse_fit`` on the filtered data.

The subsample search in ``emve_init`` is vectorized across candidates:
candidate fits, scoring, and concentration run as batched linear algebra
grouped by observation pattern, which keeps the 500-candidate default cheap
enough for Monte Carlo use.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import solve_triangular

from ._rng import substream
from .data import DataMatrix, MaskPatterns
from .distributions import chi2_quantile
from .exceptions import (
    CellguardError,
    DegenerateDataError,
    SingularityError,
)
from .gyfilter import FilterConfig, FilterResult, apply_filter
from .mscale import TuningTable, _mscale_root, _pattern_omega_norms, rho_weight

__all__ = ["Estimate", "GseConfig", "em_mle", "emve_init", "gse_fit", "tsgs"]

# EM sweeps for each candidate fit inside the subsample search.  A fixed
# count (rather than a likelihood test) keeps every candidate cheap and the
# whole pipeline exactly equivariant under coordinate-wise affine maps.
EMVE_EM_STEPS = 5

_LOG2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Estimate:
    """A fitted location vector and scatter matrix.

    ``scale`` holds the generalized M-scale at the solution: the minimized
    objective for ``gse``/``tsgs``, the winning candidate's score for
    ``emve``, and 1.0 for ``mle`` (no scale is involved).
    """

    method: str
    mu: np.ndarray
    sigma: np.ndarray
    scale: float
    iterations: int
    converged: bool

    def __post_init__(self):
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=float))
        object.__setattr__(self, "sigma", np.asarray(self.sigma, dtype=float))

    @property
    def p(self) -> int:
        return self.mu.size

    def to_json(self) -> str:
        return json.dumps(
            {
                "method": self.method,
                "mu": self.mu.tolist(),
                "sigma": self.sigma.tolist(),
                "scale": float(self.scale),
                "iterations": int(self.iterations),
                "converged": bool(self.converged),
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "Estimate":
        raw = json.loads(text)
        return cls(
            method=str(raw["method"]),
            mu=np.asarray(raw["mu"], dtype=float),
            sigma=np.asarray(raw["sigma"], dtype=float),
            scale=float(raw["scale"]),
            iterations=int(raw["iterations"]),
            converged=bool(raw["converged"]),
        )


@dataclass(frozen=True)
class GseConfig:
    """Iteration and subsampling controls for the generalized S-estimator."""

    max_iter: int = 150
    tol: float = 1e-6
    emve_subsamples: int = 500
    emve_subsample_size: int | None = None  # default 2(p+1), resolved per data set
    concentration_steps: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.max_iter < 1 or self.emve_subsamples < 1 or self.concentration_steps < 0:
            raise ValueError("iteration controls must be positive")
        if self.tol <= 0.0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if self.emve_subsample_size is not None and self.emve_subsample_size < 2:
            raise ValueError("subsample size must be at least 2")

    def resolved_subsample_size(self, p: int) -> int:
        return self.emve_subsample_size if self.emve_subsample_size is not None else 2 * (p + 1)


def _check_all_columns_observed(X: DataMatrix) -> None:
    counts = X.column_observed_counts()
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise DegenerateDataError(
            f"column(s) {empty.tolist()} have no observed cells; "
            "the scatter in those coordinates is not identifiable"
        )


# ---------------------------------------------------------------------------
# Gaussian EM maximum likelihood
# ---------------------------------------------------------------------------


def em_mle(X: DataMatrix, max_iter: int = 500, tol: float = 1e-8) -> Estimate:
    """Gaussian maximum likelihood for incomplete data via EM.

    Complete data is a fixed point and returns the sample mean and the
    covariance with divisor n in a single step.  Otherwise EM iterates
    until the log-likelihood changes by at most `tol` (relative) or
    `max_iter` sweeps; non-convergence is reported with a warning and
    ``converged=False``.
    """
    if X.n <= X.p:
        raise CellguardError(f"need n > p for the Gaussian MLE, got n={X.n}, p={X.p}")
    if X.complete:
        mu = X.values.mean(axis=0)
        diff = X.values - mu
        sigma = diff.T @ diff / X.n
        _chol_or_raise(sigma, "MLE covariance")
        return Estimate("mle", mu, sigma, 1.0, 1, True)

    _check_all_columns_observed(X)
    mu = np.array([X.values[X.mask[:, j], j].mean() for j in range(X.p)])
    var = np.array([X.values[X.mask[:, j], j].var() for j in range(X.p)])
    if np.any(var <= 0.0):
        j = int(np.argmin(var))
        raise SingularityError(f"column {j} has zero observed variance; likelihood is unbounded")
    sigma = np.diag(var)

    patterns = MaskPatterns(X.mask)
    ll_prev = None
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        s1 = np.zeros(X.p)
        s2 = np.zeros((X.p, X.p))
        ll = 0.0
        for g in patterns.patterns:
            soo = sigma[g.oo]
            L = _chol_or_raise(
                soo, f"observed-cells covariance for pattern {g.obs.tolist()}"
            )
            diffs = X.values[g.row_obs] - mu[g.obs]
            y = solve_triangular(L, diffs.T, lower=True)
            d = np.einsum("ij,ij->j", y, y)
            logdet = 2.0 * np.sum(np.log(np.diag(L)))
            ll += -0.5 * (g.obs.size * _LOG2PI + logdet) * g.rows.size - 0.5 * d.sum()
            xc = np.empty((g.rows.size, X.p))
            xc[:, g.obs] = X.values[g.row_obs]
            if g.miss.size:
                smo = sigma[g.mo]
                gain = smo @ np.linalg.inv(soo)
                xc[:, g.miss] = mu[g.miss] + diffs @ gain.T
                cond = sigma[g.mm] - gain @ smo.T
                s2[g.mm] += g.rows.size * cond
            s1 += xc.sum(axis=0)
            s2 += xc.T @ xc
        mu = s1 / X.n
        sigma = s2 / X.n - np.outer(mu, mu)
        sigma = 0.5 * (sigma + sigma.T)
        _chol_or_raise(sigma, "EM covariance update")
        if ll_prev is not None and abs(ll - ll_prev) <= tol * max(1.0, abs(ll_prev)):
            converged = True
            break
        ll_prev = ll
    if not converged:
        warnings.warn(f"EM did not converge in {max_iter} iterations", stacklevel=2)
    return Estimate("mle", mu, sigma, 1.0, it, converged)


def _chol_or_raise(A: np.ndarray, what: str) -> np.ndarray:
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        raise SingularityError(f"{what} is not positive definite") from None


# ---------------------------------------------------------------------------
# Batched helpers for the subsample search
# ---------------------------------------------------------------------------


def _chol_flags(S: np.ndarray) -> tuple[np.ndarray | None, np.ndarray]:
    """Batched Cholesky with per-candidate success flags.

    Returns (L, ok); L is None when nothing factors.  A candidate also
    fails when its factor is numerically rank deficient (tiny pivot), so
    that downstream solves cannot blow up on an effectively singular fit.
    """
    M = S.shape[0]
    ok = np.all(np.isfinite(S), axis=(1, 2))
    L = None
    if ok.all():
        try:
            L = np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            pass
    if L is None:
        L = np.zeros_like(S)
        for i in np.flatnonzero(ok):
            try:
                L[i] = np.linalg.cholesky(S[i])
            except np.linalg.LinAlgError:
                ok[i] = False
    diag = np.einsum("kii->ki", L)
    with np.errstate(invalid="ignore", divide="ignore"):
        ok &= diag.min(axis=1) > 1e-9 * diag.max(axis=1)
    return L, ok


def _pd_flags(S: np.ndarray) -> np.ndarray:
    """Per-candidate usability (positive definite, decently conditioned)."""
    return _chol_flags(S)[1]


def _inv_batch(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched matrix inverse tolerant of singular members.

    Returns (inv, ok); failed members get the identity and ok=False.
    """
    try:
        return np.linalg.inv(A), np.ones(A.shape[0], dtype=bool)
    except np.linalg.LinAlgError:
        pass
    out = np.empty_like(A)
    ok = np.ones(A.shape[0], dtype=bool)
    eye = np.eye(A.shape[1])
    for i in range(A.shape[0]):
        try:
            out[i] = np.linalg.inv(A[i])
        except np.linalg.LinAlgError:
            out[i] = eye
            ok[i] = False
    return out, ok


def _em_batch(
    values: np.ndarray,
    mask: np.ndarray,
    patterns: MaskPatterns,
    idx: np.ndarray,
    steps: int,
    mu0: np.ndarray | None = None,
    sig0: np.ndarray | None = None,
    alive: np.ndarray | None = None,
):
    """Fixed-sweep Gaussian EM run in parallel over M candidate row sets.

    `idx` has shape (M, h): row indices of each candidate's subsample.
    Candidates start from their subsample's observed column moments unless
    warm-start parameters are given.  Candidates whose covariance update
    loses positive definiteness are marked dead (their parameters are
    replaced by placeholders so the batch keeps valid linear algebra).

    Returns ``(mu, sigma, alive)`` with shapes (M, p), (M, p, p), (M,).
    """
    M, h = idx.shape
    p = values.shape[1]
    xb = values[idx]  # (M, h, p) with NaN at missing cells
    mb = mask[idx]

    # Everything tied to the (fixed) row sets is precomputed once: the pair
    # list of each incomplete pattern, the per-pattern unique candidates,
    # and the gathered observed blocks.
    pat_flat = patterns.row_pattern[idx].ravel()
    order = np.argsort(pat_flat, kind="stable")
    sorted_pat = pat_flat[order]
    groups = []
    start = 0
    while start < order.size:
        gid = int(sorted_pat[start])
        stop = int(np.searchsorted(sorted_pat, gid, side="right"))
        g = patterns.patterns[gid]
        if g.miss.size:
            sel = order[start:stop]
            cands = sel // h
            rowpos = sel % h
            uc, uinv = np.unique(cands, return_inverse=True)
            mult = np.bincount(uinv, minlength=uc.size).astype(float)
            xobs = xb[cands, rowpos][:, g.obs]
            groups.append((g, cands, rowpos, uc, uinv, mult, xobs))
        start = stop

    if alive is None:
        alive = np.ones(M, dtype=bool)
    else:
        alive = alive.copy()

    if mu0 is None:
        counts = mb.sum(axis=1)
        sums = np.where(mb, xb, 0.0).sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            mu = sums / counts
            ssq = np.where(mb, (xb - mu[:, None, :]) ** 2, 0.0).sum(axis=1)
            var = ssq / counts
        ok = (counts >= 2).all(axis=1) & np.all(np.isfinite(var) & (var > 0.0), axis=1)
        alive &= ok
        mu = np.where(np.isfinite(mu), mu, 0.0)
        var = np.where(np.isfinite(var) & (var > 0.0), var, 1.0)
        sigma = var[:, None, :] * np.eye(p)
    else:
        mu = mu0.copy()
        sigma = sig0.copy()

    mu[~alive] = 0.0
    sigma[~alive] = np.eye(p)

    obs_template = np.where(mb, xb, 0.0)
    for _ in range(steps):
        xc = obs_template.copy()
        cc = np.zeros((M, p, p))
        for g, cands, rowpos, uc, uinv, mult, xobs in groups:
            sg = sigma[uc]
            soo = sg[:, g.obs[:, None], g.obs[None, :]]
            smo = sg[:, g.miss[:, None], g.obs[None, :]]
            smm = sg[:, g.miss[:, None], g.miss[None, :]]
            inv, inv_ok = _inv_batch(soo)
            if not inv_ok.all():
                alive[uc[~inv_ok]] = False
            gain = smo @ inv
            cond = smm - gain @ np.swapaxes(smo, 1, 2)
            rhs = xobs - mu[cands][:, g.obs]
            fill = mu[cands][:, g.miss] + np.einsum("kmo,ko->km", gain[uinv], rhs)
            xc[cands[:, None], rowpos[:, None], g.miss[None, :]] = fill
            cc[uc[:, None, None], g.miss[None, :, None], g.miss[None, None, :]] += (
                cond * mult[:, None, None]
            )
        mu = xc.mean(axis=1)
        xd = xc - mu[:, None, :]
        sigma = (np.einsum("krp,krq->kpq", xd, xd) + cc) / h
        sigma = 0.5 * (sigma + np.swapaxes(sigma, 1, 2))
        alive &= _pd_flags(sigma)
        mu[~alive] = 0.0
        sigma[~alive] = np.eye(p)
    return mu, sigma, alive


def _batch_distances(
    values: np.ndarray, patterns: MaskPatterns, mu: np.ndarray, sigma: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Partial Mahalanobis distances of all rows under M candidate fits.

    Returns ``(d, dstar)`` of shape (M, n): the plain squared distances and
    the determinant-normalized ones (dstar = |Sigma^(u)|^{1/p_i} * d).
    Candidates whose scatter submatrix cannot be inverted get +inf rows,
    which removes them from any smallest-score selection.
    """
    M = mu.shape[0]
    n = values.shape[0]
    d = np.empty((M, n))
    dstar = np.empty((M, n))
    for g in patterns.patterns:
        soo = sigma[:, g.obs[:, None], g.obs[None, :]]
        inv, ok = _inv_batch(soo)
        sign, logdet = np.linalg.slogdet(soo)
        ok &= sign > 0
        diffs = values[g.row_obs][None, :, :] - mu[:, None, g.obs]
        t = np.einsum("kro,koq->krq", diffs, inv)
        dg = np.einsum("krq,krq->kr", t, diffs)
        d[:, g.rows] = dg
        dstar[:, g.rows] = dg * np.exp(logdet / g.obs.size)[:, None]
        if not ok.all():
            d[np.ix_(~ok, g.rows)] = np.inf
            dstar[np.ix_(~ok, g.rows)] = np.inf
    return d, dstar


def _half_scale(r: np.ndarray, c_row: np.ndarray, b: float = 0.5) -> np.ndarray:
    """Hard-rejection M-scale per candidate: a c-weighted upper median.

    Solves ``sum_i c_i 1{r_i / s > 1} = b sum_i c_i`` in the smallest-s
    sense for each row of `r`.
    """
    order = np.argsort(r, axis=1, kind="stable")
    rs = np.take_along_axis(r, order, axis=1)
    ws = c_row[order]
    total = float(c_row.sum())
    tail = total - np.cumsum(ws, axis=1)
    # Tolerance absorbs cumsum rounding at exact half-sample boundaries.
    t_idx = np.argmax(tail <= b * total * (1.0 + 1e-12), axis=1)
    return np.take_along_axis(rs, t_idx[:, None], axis=1)[:, 0]


def _subsample_indices(n: int, size: int, count: int, seed: int) -> np.ndarray:
    """Candidate row sets drawn without replacement, one RNG stream each."""
    idx = np.empty((count, size), dtype=np.intp)
    for j in range(count):
        idx[j] = substream(seed, 1, j).choice(n, size=size, replace=False)
    return idx


# ---------------------------------------------------------------------------
# EMVE initial estimator
# ---------------------------------------------------------------------------


def _robust_column_scales(X: DataMatrix) -> np.ndarray:
    """Scaled MAD per column (std fallback for ties), for pre-scaling."""
    out = np.empty(X.p)
    for j in range(X.p):
        col = X.values[X.mask[:, j], j]
        med = np.median(col)
        s = 1.4826 * np.median(np.abs(col - med))
        if s == 0.0:
            s = float(col.std())
        if s == 0.0:
            raise DegenerateDataError(f"column {j} has zero dispersion")
        out[j] = s
    return out


def emve_init(X: DataMatrix, cfg: GseConfig = GseConfig()) -> Estimate:
    """Subsampling-with-concentration initial estimate of location/scatter.

    Each candidate subsample is fitted by a short Gaussian EM and scored by
    the hard-rejection generalized M-scale of its determinant-normalized
    partial distances over *all* rows -- a weighted upper median, that is,
    the minimum-volume-ellipsoid criterion extended to incomplete rows.
    Distances are normalized by the diagonal matrix of squared robust
    column scales (the score's reference scatter), which keeps the ranking
    equivariant under coordinate-wise affine maps whatever the missingness
    patterns.  The per-dimension constants for the hard-rejection loss
    follow the same normal-consistency calibration as the smooth loss,
    which puts them in closed form: the chi-square medians.  Concentration
    rounds keep the rows closest to the candidate and refit.  The winner's
    scatter is rescaled so that its own self-normalized score is one, which
    also makes its size consistent at the normal model.
    """
    size = cfg.resolved_subsample_size(X.p)
    if size <= X.p:
        raise CellguardError(f"subsample size {size} must exceed the dimension {X.p}")
    if X.n < size:
        raise CellguardError(f"need n >= subsample size, got n={X.n}, size={size}")
    _check_all_columns_observed(X)

    patterns = MaskPatterns(X.mask)
    # Hard-rejection analogue of the smooth-loss constants: E 1{chi2_k/c > 1} = b
    # has the closed-form solution c = chi-square quantile at 1 - b.
    b = 0.5
    c_hard = np.array([chi2_quantile(1.0 - b, k) for k in range(1, X.p + 1)])
    c_row = c_hard[X.row_observed_counts() - 1]
    # |Omega0^(u_i)|^{1/p_i} for the diagonal reference scatter Omega0.
    log_scale2 = 2.0 * np.log(_robust_column_scales(X))
    om_row = np.array(
        [math.exp(log_scale2[g.obs].mean()) for g in patterns.patterns]
    )[patterns.row_pattern]
    den = c_row * om_row

    idx = _subsample_indices(X.n, size, cfg.emve_subsamples, cfg.seed)
    mu, sigma, alive = _em_batch(X.values, X.mask, patterns, idx, EMVE_EM_STEPS)

    # Concentration support size.  The classical (n + p + 1)/2 keeps p + 1
    # rows beyond half the sample, so the kept set stays in general position
    # even when a coincident outlier cluster approaches half the data; a
    # bare n/2 support collapses onto a zero-volume fit in that situation.
    h = min(X.n, math.ceil((X.n + X.p + 1) / 2))
    for _ in range(cfg.concentration_steps):
        _, dstar = _batch_distances(X.values, patterns, mu, sigma)
        keep = np.argsort(dstar / den, axis=1, kind="stable")[:, :h]
        mu, sigma, alive = _em_batch(
            X.values, X.mask, patterns, keep, EMVE_EM_STEPS, mu, sigma, alive
        )
    d, dstar = _batch_distances(X.values, patterns, mu, sigma)
    scores = _half_scale(dstar / den, c_row, b)

    scores[~alive] = np.inf
    scores[~np.isfinite(scores)] = np.inf
    best = int(np.argmin(scores))  # ties resolve to the lowest candidate index
    if not np.isfinite(scores[best]) or scores[best] <= 0.0:
        raise DegenerateDataError(
            "every candidate subsample produced a singular or degenerate fit"
        )
    # Self-normalized scale of the winner (reference = the winner itself, so
    # determinants cancel); multiplying the scatter by it makes the winner's
    # own score exactly one.
    lam = float(_half_scale(d[best : best + 1] / c_row, c_row, b)[0])
    return Estimate(
        method="emve",
        mu=mu[best],
        sigma=sigma[best] * lam,
        scale=float(scores[best]),
        iterations=cfg.concentration_steps,
        converged=True,
    )


# ---------------------------------------------------------------------------
# Generalized S-estimator
# ---------------------------------------------------------------------------


class _PatternPass:
    """One sweep over the pattern groups under a given (mu, sigma).

    Computes plain and determinant-normalized partial distances for every
    row plus, for incomplete patterns, the conditional completion of the
    missing block (mean fill and conditional covariance on sigma's scale).
    """

    __slots__ = ("d", "dstar", "sdet", "xc", "cond")

    def __init__(self, X: DataMatrix, patterns: MaskPatterns, mu, sigma):
        n, p = X.shape
        self.d = np.empty(n)
        self.dstar = np.empty(n)
        self.sdet = np.empty(n)  # |sigma^(u_i)|^{1/p_i} per row
        self.xc = np.where(X.mask, X.values, 0.0)
        self.cond = []  # (miss indices, rows, conditional covariance, p_i)
        for g in patterns.patterns:
            soo = sigma[g.oo]
            L = _chol_or_raise(soo, f"scatter submatrix for coordinates {g.obs.tolist()}")
            diffs = X.values[g.row_obs] - mu[g.obs]
            y = solve_triangular(L, diffs.T, lower=True)
            dg = np.einsum("ij,ij->j", y, y)
            logdet = 2.0 * np.sum(np.log(np.diag(L)))
            detpow = np.exp(logdet / g.obs.size)
            self.d[g.rows] = dg
            self.dstar[g.rows] = dg * detpow
            self.sdet[g.rows] = detpow
            if g.miss.size:
                smo = sigma[g.mo]
                gain = smo @ np.linalg.inv(soo)
                self.xc[np.ix_(g.rows, g.miss)] = mu[g.miss] + diffs @ gain.T
                cond = sigma[g.mm] - gain @ smo.T
                self.cond.append((g.miss, g.rows, cond, g.obs.size))


def _det_normalize(sigma: np.ndarray, what: str) -> np.ndarray:
    L = _chol_or_raise(sigma, what)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return sigma * np.exp(-logdet / sigma.shape[0])


def gse_fit(
    X: DataMatrix,
    omega: Estimate,
    cfg: GseConfig = GseConfig(),
    _trace: list | None = None,
) -> Estimate:
    """Generalized S-estimator of location and scatter on incomplete data.

    Starting from the initial estimate `omega`, alternates weighted
    EM-style updates of (mu, Sigma) with recomputation of the generalized
    M-scale, keeping |Sigma| = 1 along the way.  The scale sequence must be
    non-increasing: a terminal increase that is tiny (within 50x the
    convergence tolerance) or small next to the preceding descent step is
    the fixed-point wobble that signals convergence, while a larger one
    aborts the iteration with ``converged=False``; either way the best
    iterate seen is returned.  On return the scatter is sized so that the
    M-scale of the estimate against itself equals one.

    `_trace`, when a list, collects the scale value of every sweep
    (testing hook).
    """
    _check_all_columns_observed(X)
    patterns = MaskPatterns(X.mask)
    tuning = TuningTable.for_dimension(X.p)
    c_row = tuning.as_array()[X.row_observed_counts() - 1]

    omega_mat = np.asarray(omega.sigma, dtype=float)
    _chol_or_raise(omega_mat, "initial scatter omega")
    om_row = _pattern_omega_norms(patterns, omega_mat)  # |Omega^(u_i)|^{1/p_i}

    mu = np.asarray(omega.mu, dtype=float).copy()
    sigma = _det_normalize(omega_mat, "initial scatter omega")

    s = s_prev = None
    saved = None
    sweep = None
    last_drop = None
    converged = False
    stale_sweep = False
    iterations = 0
    for it in range(cfg.max_iter + 1):
        sweep = _PatternPass(X, patterns, mu, sigma)
        s = _mscale_root(sweep.dstar / (c_row * om_row), c_row, tuning.b)
        if _trace is not None:
            _trace.append(s)
        if s_prev is not None:
            if s > s_prev + 1e-10 * max(1.0, s_prev):
                # The previous iterate is the minimum seen.  An overshoot
                # that is tiny, or small next to the preceding descent step,
                # is the terminal wobble of the fixed point; anything larger
                # (a cycle or genuine ascent) is a failure.
                rise = s - s_prev
                converged = rise <= 50.0 * cfg.tol * s_prev or (
                    last_drop is not None and rise <= 0.5 * last_drop
                )
                mu, sigma, s = saved
                stale_sweep = True
                break
            if abs(s - s_prev) <= cfg.tol * s_prev:
                converged = True
                break
            last_drop = s_prev - s
        if it == cfg.max_iter:
            warnings.warn(f"GSE did not converge in {cfg.max_iter} iterations", stacklevel=2)
            break
        saved = (mu, sigma, s)
        s_prev = s

        # Stationarity of the implicit scale gives row weights carrying the
        # per-pattern determinant factor, and a conditional-covariance
        # correction weighted by d_i/p_i (which puts the correction, taken
        # on sigma's det-1 scale, onto the data scale automatically).
        w = rho_weight(sweep.dstar / (s * c_row * om_row))
        a = w * sweep.sdet / (c_row * om_row)
        sa = float(a.sum())
        mu_new = (a[:, None] * sweep.xc).sum(axis=0) / sa
        xd = sweep.xc - mu_new
        scatter = (a[:, None] * xd).T @ xd
        for miss, rows, cond, p_obs in sweep.cond:
            scatter[np.ix_(miss, miss)] += float((a[rows] * sweep.d[rows]).sum() / p_obs) * cond
        scatter /= sa
        scatter = 0.5 * (scatter + scatter.T)
        sigma = _det_normalize(scatter, "scatter update")
        mu = mu_new
        iterations += 1

    if stale_sweep:
        sweep = _PatternPass(X, patterns, mu, sigma)
    size = _mscale_root(sweep.d / c_row, c_row, tuning.b)
    return Estimate(
        method="gse",
        mu=mu,
        sigma=sigma * size,
        scale=float(s),
        iterations=iterations,
        converged=converged,
    )


def tsgs(
    X: DataMatrix,
    filter_cfg: FilterConfig = FilterConfig(),
    gse_cfg: GseConfig = GseConfig(),
) -> tuple[Estimate, FilterResult]:
    """Two-step estimator: univariate outlier filter, then the generalized S.

    Returns the final estimate (method ``"tsgs"``) together with the filter
    audit trail.  Cells flagged by the filter are treated as missing in the
    second step, in union with any cells that were missing on input.
    """
    filtered, fres = apply_filter(X, filter_cfg)
    _check_all_columns_observed(filtered)
    omega = emve_init(filtered, gse_cfg)
    est = gse_fit(filtered, omega, gse_cfg)
    return replace(est, method="tsgs"), fres
