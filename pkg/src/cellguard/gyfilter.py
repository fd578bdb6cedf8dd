"""Adaptive univariate outlier filter (step I of the two-step estimator).

Each column is standardized by its median and scaled MAD.  The empirical
tail of the absolute standardized values is compared with the standard
normal tail beyond a high quantile; the excess mass determines how many of
the largest cells are flagged and converted to missing.  On clean data the
flagged fraction vanishes as the sample grows, so the filter is
asymptotically harmless.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import ColumnSummary, DataMatrix, column_summaries
from .distributions import normal_cdf, normal_quantile
from .exceptions import CellguardError

__all__ = ["FilterConfig", "FilterResult", "flag_proportion", "adaptive_cutoff", "apply_filter"]

# Guards the exact-count boundary: terms like 1.0 - 0.9 fall a few ulp short
# of the real-arithmetic value, which would make floor(n*d) drop one cell.
_COUNT_EPS = 1e-9


@dataclass(frozen=True)
class FilterConfig:
    """Tail comparison settings.

    `alpha` sets the quantile eta of the reference |Z| distribution beyond
    which the empirical tail is inspected; `reference` names the reference
    distribution for standardized cells (only the standard normal is
    supported).
    """

    alpha: float = 0.95
    reference: str = "normal"

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.reference != "normal":
            raise ValueError(f"unsupported reference distribution {self.reference!r}")

    @property
    def eta(self) -> float:
        """Quantile of |Z| at level alpha under the reference distribution."""
        return float(normal_quantile((1.0 + self.alpha) / 2.0))


@dataclass(frozen=True)
class FilterResult:
    """Audit trail of one filtering pass.

    Attributes
    ----------
    summaries : ColumnSummary
        Per-column centers/scales used for standardization.
    d : ndarray, shape (p,)
        Flagged-outlier proportion per column.
    cutoff : ndarray, shape (p,)
        Adaptive cutoff per column on the |Z| scale; +inf where nothing
        was flagged.
    mask_out : ndarray of bool, shape (n, p)
        Observation mask after filtering (a subset of the input mask).
    q_n : float
        Fraction of rows fully observed after filtering.
    flagged : tuple of (row, col)
        Newly flagged cells in row-major order.
    dropped_rows : tuple of int
        Rows that lost their last observed cell and were removed from the
        filtered matrix.
    """

    summaries: ColumnSummary
    d: np.ndarray
    cutoff: np.ndarray
    mask_out: np.ndarray
    q_n: float
    flagged: tuple = ()
    dropped_rows: tuple = field(default=())

    def to_json(self) -> str:
        """Serialize to JSON; infinite cutoffs are emitted as null."""
        payload = {
            "d": [float(v) for v in self.d],
            "cutoff": [None if math.isinf(v) else float(v) for v in self.cutoff],
            "flagged": [[int(i), int(j)] for i, j in self.flagged],
            "q_n": float(self.q_n),
        }
        return json.dumps(payload, sort_keys=True)


def _flag_count(n_obs: int, d: float) -> int:
    return int(math.floor(n_obs * d + _COUNT_EPS))


def flag_proportion(zcol, cfg: FilterConfig = FilterConfig()) -> float:
    """Proportion of a standardized column flagged as outlying.

    Compares the reference distribution of |Z| with the empirical one at
    every order statistic above the reference quantile eta and returns the
    largest positive shortfall (0 when the empirical tail is no lighter
    than the reference tail).
    """
    z = np.asarray(zcol, dtype=float)
    if z.ndim != 1 or z.size == 0:
        raise CellguardError("zcol must be a non-empty 1-D array")
    if not np.all(np.isfinite(z)):
        raise CellguardError("zcol must be finite")
    a = np.sort(np.abs(z))
    m = a.size
    i0 = int(np.searchsorted(a, cfg.eta, side="left"))  # count of |Z| < eta
    if i0 >= m:
        return 0.0
    tail = a[i0:]
    ref = 2.0 * normal_cdf(tail) - 1.0  # P(|Z| <= t) under the reference
    ranks = np.arange(i0, m, dtype=float) / m  # (i - 1)/m for 1-based i > i0
    return float(np.max(np.maximum(ref - ranks, 0.0)))


def adaptive_cutoff(zcol, d: float) -> tuple[float, np.ndarray]:
    """Cutoff value and flagged index set for a standardized column.

    Flags exactly ``floor(m * d)`` cells with the largest |Z| (ties broken
    toward larger original index).  The reported cutoff is the largest
    unflagged |Z|; +inf when nothing is flagged.
    """
    z = np.asarray(zcol, dtype=float)
    m = z.size
    n0 = _flag_count(m, d)
    if n0 <= 0:
        return math.inf, np.empty(0, dtype=int)
    order = np.argsort(np.abs(z), kind="stable")
    flagged = np.sort(order[m - n0:])
    cutoff = float(np.abs(z)[order[m - n0 - 1]]) if n0 < m else 0.0
    return cutoff, flagged


def apply_filter(
    X: DataMatrix, cfg: FilterConfig = FilterConfig()
) -> tuple[DataMatrix, FilterResult]:
    """Filter a data matrix column by column, converting flags to missing.

    Already-missing cells stay missing and do not take part in the tail
    comparison (each column's empirical CDF uses its observed count).
    Rows left with no observed cell are dropped from the returned matrix
    with a warning; they remain visible in ``mask_out``/``dropped_rows``.

    Returns
    -------
    (DataMatrix, FilterResult)
        The filtered matrix and the per-column audit trail.
    """
    summaries = column_summaries(X)
    mask_out = X.mask.copy()
    d = np.zeros(X.p)
    cutoff = np.full(X.p, math.inf)
    flagged_cells: list[tuple[int, int]] = []
    for j in range(X.p):
        rows = np.flatnonzero(X.mask[:, j])
        z = (X.values[rows, j] - summaries.center[j]) / summaries.scale[j]
        d[j] = flag_proportion(z, cfg)
        cutoff[j], local = adaptive_cutoff(z, d[j])
        for r in rows[local]:
            mask_out[r, j] = False
            flagged_cells.append((int(r), j))
    flagged_cells.sort()

    q_n = float(mask_out.all(axis=1).mean())
    empty = np.flatnonzero(~mask_out.any(axis=1))
    keep = np.flatnonzero(mask_out.any(axis=1))
    if empty.size:
        warnings.warn(
            f"filter removed every cell of row(s) {empty.tolist()}; dropping them",
            stacklevel=2,
        )
    if keep.size < 2:
        raise CellguardError("fewer than 2 rows remain observed after filtering")

    values = X.values.copy()
    values[~mask_out] = np.nan
    filtered = DataMatrix(values[keep], mask_out[keep])
    result = FilterResult(
        summaries=summaries,
        d=d,
        cutoff=cutoff,
        mask_out=mask_out,
        q_n=q_n,
        flagged=tuple(flagged_cells),
        dropped_rows=tuple(int(r) for r in empty),
    )
    return filtered, result
