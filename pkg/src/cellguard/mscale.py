"""Bounded loss, tuning constants, partial distances, and the generalized M-scale.

The generalized M-scale of a data set with missing cells solves

    sum_i c_{p_i} rho( dstar_i / (s * c_{p_i} * |Omega^(u_i)|^{1/p_i}) )
        = b * sum_i c_{p_i}

where dstar_i is the determinant-normalized squared Mahalanobis distance of
row i restricted to its observed coordinates u_i, p_i is the number of
observed coordinates, and the constants c_k calibrate the scale so that it
is consistent at the multivariate normal.  The left side is continuous and
non-increasing in s, so the root is found by geometric bracketing followed
by Brent refinement.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import integrate, optimize, stats
from scipy.linalg import solve_triangular

from .data import DataMatrix, MaskPatterns
from .distributions import chi2_quantile
from .exceptions import CellguardError, ConvergenceError, DegenerateDataError, SingularityError

__all__ = [
    "RhoConfig",
    "TuningTable",
    "ScaleProblem",
    "rho",
    "rho_weight",
    "tuning_constant",
    "partial_mahalanobis",
    "generalized_mscale",
]


@dataclass(frozen=True)
class RhoConfig:
    """Loss family and target value b of the M-scale equation."""

    family: str = "bisquare"
    b: float = 0.5

    def __post_init__(self):
        if self.family != "bisquare":
            raise ValueError(f"unsupported rho family {self.family!r}")
        if not 0.0 < self.b < 1.0:
            raise ValueError(f"b must be in (0, 1), got {self.b}")


def _rho_bisquare(u: np.ndarray) -> np.ndarray:
    return np.where(u >= 1.0, 1.0, 1.0 - (1.0 - u) ** 3)


def rho(u, cfg: RhoConfig = RhoConfig()):
    """Bisquare loss min(1, 1 - (1 - u)^3) for u >= 0."""
    arr = np.asarray(u, dtype=float)
    if np.any(arr < 0.0):
        raise CellguardError(f"rho argument must be >= 0, got {u!r}")
    out = _rho_bisquare(arr)
    return float(out) if np.isscalar(u) else out


def rho_weight(u):
    """Derivative of the bisquare loss: 3(1-u)^2 on [0, 1], zero beyond."""
    arr = np.asarray(u, dtype=float)
    out = np.where(arr >= 1.0, 0.0, 3.0 * (1.0 - arr) ** 2)
    return float(out) if np.isscalar(u) else out


@lru_cache(maxsize=None)
def tuning_constant(k: int, b: float = 0.5) -> float:
    """Constant c_k with E[rho(Q / c_k)] = b for Q ~ chi-square(k).

    The expectation is computed by adaptive quadrature of rho(q/c) against
    the chi-square density on [0, c]; beyond c the loss is identically 1,
    so the tail contributes the exact value P(Q > c).  The root in c is
    bracketed (the chi-square (1-b)-quantile is always a lower bracket) and
    refined with Brent's method to |E - b| <= 1e-8.
    """
    if not isinstance(k, (int, np.integer)) or k < 1:
        raise CellguardError(f"k must be an integer >= 1, got {k!r}")
    if not 0.0 < b < 1.0:
        raise CellguardError(f"b must be in (0, 1), got {b}")
    dist = stats.chi2(k)

    def expectation(c: float) -> float:
        # On [0, c] the argument q/c stays in [0, 1], where the loss is the
        # plain cubic; beyond c it is identically 1 and integrates to sf(c).
        body, _ = integrate.quad(
            lambda q: (1.0 - (1.0 - q / c) ** 3) * dist.pdf(q),
            0.0,
            c,
            epsabs=1e-13,
            epsrel=1e-12,
            limit=200,
        )
        return body + dist.sf(c)

    lo = float(chi2_quantile(1.0 - b, k))  # rho >= 1{u >= 1}, so E(lo) >= b
    hi = lo
    for _ in range(200):
        hi *= 2.0
        if expectation(hi) < b:
            break
    else:  # pragma: no cover - cannot happen for bisquare with b in (0,1)
        raise ConvergenceError(f"failed to bracket tuning constant for k={k}")
    c = float(optimize.brentq(lambda c: expectation(c) - b, lo, hi, xtol=1e-12, rtol=1e-14))
    if abs(expectation(c) - b) > 1e-8:  # pragma: no cover - brentq is tighter
        raise ConvergenceError(f"tuning constant for k={k} did not reach tolerance")
    return c


@dataclass(frozen=True)
class TuningTable:
    """Cached tuning constants c_1..c_pmax for one target b."""

    b: float = 0.5
    c: dict = field(default_factory=dict)

    @classmethod
    def for_dimension(cls, p_max: int, b: float = 0.5) -> "TuningTable":
        return cls(b=b, c={k: tuning_constant(k, b) for k in range(1, p_max + 1)})

    def __getitem__(self, k: int) -> float:
        if k not in self.c:
            raise KeyError(f"tuning constant for k={k} not in table")
        return self.c[k]

    def as_array(self) -> np.ndarray:
        """Constants as an array indexed by k-1, for vectorized lookups."""
        p_max = max(self.c)
        return np.array([self.c[k] for k in range(1, p_max + 1)])

    def to_json(self) -> str:
        return json.dumps({"b": self.b, "c": {str(k): v for k, v in sorted(self.c.items())}})

    @classmethod
    def from_json(cls, text: str) -> "TuningTable":
        raw = json.loads(text)
        return cls(b=float(raw["b"]), c={int(k): float(v) for k, v in raw["c"].items()})


def partial_mahalanobis(x, mu, Sigma, mask=None) -> tuple[float, float, int]:
    """Squared Mahalanobis distance of a row restricted to observed coordinates.

    Returns ``(d, d_star, p_i)`` where d uses the observed submatrix of
    Sigma directly and d_star uses that submatrix normalized to unit
    determinant (d_star = |Sigma^(u)|^{1/p_i} * d).  NaNs in `x` count as
    missing when no explicit mask is given.
    """
    x = np.asarray(x, dtype=float)
    mu = np.asarray(mu, dtype=float)
    Sigma = np.asarray(Sigma, dtype=float)
    if mask is None:
        mask = ~np.isnan(x)
    mask = np.asarray(mask, dtype=bool)
    obs = np.flatnonzero(mask)
    p_i = obs.size
    if p_i < 1:
        raise CellguardError("row has no observed coordinates")
    sub = Sigma[np.ix_(obs, obs)]
    diff = x[obs] - mu[obs]
    try:
        L = np.linalg.cholesky(sub)
    except np.linalg.LinAlgError:
        raise SingularityError(
            f"observed submatrix (coordinates {obs.tolist()}) is not positive definite"
        ) from None
    y = solve_triangular(L, diff, lower=True)
    d = float(y @ y)
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    d_star = d * float(np.exp(logdet / p_i))
    return d, d_star, p_i


@dataclass(frozen=True)
class ScaleProblem:
    """Inputs of one generalized M-scale evaluation."""

    mu: np.ndarray
    Sigma: np.ndarray
    Omega: np.ndarray
    data: DataMatrix

    def __post_init__(self):
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=float))
        object.__setattr__(self, "Sigma", np.asarray(self.Sigma, dtype=float))
        object.__setattr__(self, "Omega", np.asarray(self.Omega, dtype=float))
        p = self.data.p
        if self.mu.shape != (p,):
            raise ValueError(f"mu must have shape ({p},)")
        for name, M in (("Sigma", self.Sigma), ("Omega", self.Omega)):
            if M.shape != (p, p):
                raise ValueError(f"{name} must have shape ({p}, {p})")
            try:
                np.linalg.cholesky(M)
            except np.linalg.LinAlgError:
                raise SingularityError(f"{name} is not positive definite") from None


def _pattern_distances(values, patterns: MaskPatterns, mu, Sigma):
    """Per-row (d, dstar) under (mu, Sigma), grouped by observation pattern."""
    n = values.shape[0]
    d = np.empty(n)
    dstar = np.empty(n)
    for obs, rows in patterns:
        if obs.size == 0:
            raise CellguardError(f"row(s) {rows.tolist()} have no observed coordinates")
        sub = Sigma[np.ix_(obs, obs)]
        try:
            L = np.linalg.cholesky(sub)
        except np.linalg.LinAlgError:
            raise SingularityError(
                f"submatrix for observed coordinates {obs.tolist()} "
                f"(rows {rows[:5].tolist()}...) is not positive definite"
            ) from None
        diffs = values[np.ix_(rows, obs)] - mu[obs]
        y = solve_triangular(L, diffs.T, lower=True)
        dg = np.einsum("ij,ij->j", y, y)
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
        d[rows] = dg
        dstar[rows] = dg * np.exp(logdet / obs.size)
    return d, dstar


def _pattern_omega_norms(patterns: MaskPatterns, Omega):
    """Per-row |Omega^(u_i)|^{1/p_i}, factored once per distinct pattern."""
    n = patterns.n
    out = np.empty(n)
    for obs, rows in patterns:
        sub = Omega[np.ix_(obs, obs)]
        try:
            L = np.linalg.cholesky(sub)
        except np.linalg.LinAlgError:
            raise SingularityError(
                f"Omega submatrix for observed coordinates {obs.tolist()} is not positive definite"
            ) from None
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
        out[rows] = np.exp(logdet / obs.size)
    return out


def _mscale_root(ratios: np.ndarray, c_row: np.ndarray, b: float) -> float:
    """Solve sum c_i rho(r_i / s) = b sum c_i for s > 0.

    `ratios` holds r_i = dstar_i / (c_i * omega_i) per row.  The left side
    is non-increasing in s; the bracket grows geometrically (factor 4) from
    the median ratio until it straddles the target, then Brent's method
    refines the root.
    """
    r = np.asarray(ratios, dtype=float)
    c = np.asarray(c_row, dtype=float)
    if np.all(r == 0.0):
        raise DegenerateDataError("all distances are zero; scale is undefined")
    target = b * float(np.sum(c))

    def lhs(s: float) -> float:
        return float(np.sum(c * _rho_bisquare(r / s)))

    s0 = float(np.median(r))
    if s0 <= 0.0:
        s0 = float(np.min(r[r > 0.0]))
    lo = hi = s0
    f_lo = f_hi = lhs(s0)
    for _ in range(200):
        if f_lo >= target:
            break
        lo /= 4.0
        f_lo = lhs(lo)
    else:
        raise ConvergenceError("no sign change after 200 bracket expansions (lower)")
    for _ in range(200):
        if f_hi <= target:
            break
        hi *= 4.0
        f_hi = lhs(hi)
    else:
        raise ConvergenceError("no sign change after 200 bracket expansions (upper)")
    if lo == hi:
        s = lo
    else:
        s = float(optimize.brentq(lambda s: lhs(s) - target, lo, hi, xtol=1e-300, rtol=1e-12))
    if abs(lhs(s) - target) > 1e-8 * target:  # pragma: no cover - brentq is tighter
        raise ConvergenceError("M-scale root did not reach the residual tolerance")
    return s


def generalized_mscale(problem: ScaleProblem, tuning: TuningTable | None = None) -> float:
    """Generalized M-scale of a data set under (mu, Sigma) with normalizer Omega."""
    if tuning is None:
        tuning = TuningTable.for_dimension(problem.data.p)
    patterns = MaskPatterns(problem.data.mask)
    _, dstar = _pattern_distances(problem.data.values, patterns, problem.mu, problem.Sigma)
    omega = _pattern_omega_norms(patterns, problem.Omega)
    c_all = tuning.as_array()
    p_i = problem.data.row_observed_counts()
    c_row = c_all[p_i - 1]
    return _mscale_root(dstar / (c_row * omega), c_row, tuning.b)


def mscale_complete(distances, k: int, b: float = 0.5) -> float:
    """M-scale of plain squared distances for complete k-dimensional rows.

    Solves mean rho(d_i / (s c_k)) = b; convenience entry used by tests
    and one-dimensional consumers.
    """
    d = np.asarray(distances, dtype=float)
    c_k = tuning_constant(k, b)
    return _mscale_root(d / c_k, np.full(d.size, c_k), b)
