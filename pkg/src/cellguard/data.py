"""Masked data matrices, CSV ingestion, and coordinate-wise robust summaries.

A :class:`DataMatrix` is an n-by-p table of real measurements together with
an aligned boolean mask; ``mask[i, j]`` is True exactly when cell (i, j) is
observed.  Unobserved cells are stored as NaN so that any computation that
accidentally reads them poisons its result instead of silently using stale
numbers.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .exceptions import CsvParseError, DegenerateColumnError

#: Consistency factor 1/qnorm(0.75) making the MAD estimate sigma at the normal.
MAD_SCALE = 1.4826


class DataMatrix:
    """Immutable n x p data table with an observation mask.

    Parameters
    ----------
    values : array_like, shape (n, p)
        Cell values.  Entries at masked-out positions are ignored (and
        stored as NaN).
    mask : array_like of bool, shape (n, p), optional
        True marks an observed cell.  Defaults to all-observed, except that
        NaNs in `values` are treated as missing.
    """

    __slots__ = ("values", "mask", "n", "p")

    def __init__(self, values, mask=None):
        values = np.array(values, dtype=float, copy=True)
        if values.ndim != 2:
            raise ValueError(f"values must be 2-D, got shape {values.shape}")
        if mask is None:
            mask = ~np.isnan(values)
        mask = np.array(mask, dtype=bool, copy=True)
        if mask.shape != values.shape:
            raise ValueError(f"mask shape {mask.shape} != values shape {values.shape}")
        n, p = values.shape
        if p < 1:
            raise ValueError("need at least one column")
        if n < 2:
            raise ValueError(f"need at least two rows, got {n}")
        bad = mask & ~np.isfinite(values)
        if np.any(bad):
            i, j = np.argwhere(bad)[0]
            raise ValueError(f"observed cell ({i}, {j}) is not finite")
        values[~mask] = np.nan
        values.flags.writeable = False
        mask.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "p", p)

    def __setattr__(self, name, value):
        raise AttributeError("DataMatrix is immutable")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n, self.p)

    @property
    def complete(self) -> bool:
        return bool(self.mask.all())

    def row_observed_counts(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    def column_observed_counts(self) -> np.ndarray:
        return self.mask.sum(axis=0)

    def observed_fraction_of_full_rows(self) -> float:
        """Fraction of rows with every coordinate observed."""
        return float(self.mask.all(axis=1).mean())

    def select_rows(self, rows) -> "DataMatrix":
        rows = np.asarray(rows, dtype=int)
        return DataMatrix(self.values[rows], self.mask[rows])

    def __eq__(self, other) -> bool:
        if not isinstance(other, DataMatrix):
            return NotImplemented
        if self.shape != other.shape or not np.array_equal(self.mask, other.mask):
            return False
        return np.array_equal(self.values[self.mask], other.values[other.mask])

    def __repr__(self) -> str:
        miss = int((~self.mask).sum())
        return f"DataMatrix(n={self.n}, p={self.p}, missing_cells={miss})"


class PatternGroup:
    """One distinct observation pattern with precomputed index machinery."""

    __slots__ = ("obs", "miss", "rows", "oo", "mo", "mm", "row_obs")

    def __init__(self, obs: np.ndarray, miss: np.ndarray, rows: np.ndarray):
        self.obs = obs
        self.miss = miss
        self.rows = rows
        # open-mesh grids for submatrix and data-block extraction
        self.oo = (obs[:, None], obs[None, :])
        self.mo = (miss[:, None], obs[None, :])
        self.mm = (miss[:, None], miss[None, :])
        self.row_obs = (rows[:, None], obs[None, :])


class MaskPatterns:
    """Rows of a DataMatrix grouped by identical observation pattern.

    Pattern order is the lexicographic order of the boolean mask rows, so
    grouping is deterministic.  Every consumer that loops over patterns and
    scatters per-row results back into row-indexed arrays gets outputs that
    do not depend on evaluation order.
    """

    __slots__ = ("patterns", "row_pattern", "n", "p")

    def __init__(self, mask: np.ndarray):
        mask = np.asarray(mask, dtype=bool)
        uniq, inverse = np.unique(mask, axis=0, return_inverse=True)
        self.n, self.p = mask.shape
        self.row_pattern = inverse.astype(np.intp)
        self.patterns = []
        allc = np.arange(self.p)
        for g in range(uniq.shape[0]):
            obs = np.flatnonzero(uniq[g])
            miss = allc[~uniq[g]]
            rows = np.flatnonzero(self.row_pattern == g)
            self.patterns.append(PatternGroup(obs, miss, rows))

    def __iter__(self):
        for g in self.patterns:
            yield g.obs, g.rows

    def __len__(self) -> int:
        return len(self.patterns)


@dataclass(frozen=True)
class ColumnSummary:
    """Per-column robust center and scale (median and scaled MAD)."""

    center: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        object.__setattr__(self, "scale", np.asarray(self.scale, dtype=float))


def column_summaries(X: DataMatrix) -> ColumnSummary:
    """Coordinate-wise median and consistency-scaled MAD of the observed cells.

    For each column the center is the median (midpoint of the two central
    order statistics for an even count) and the scale is
    ``1.4826 * median(|x - center|)``.

    Raises
    ------
    DegenerateColumnError
        If a column has fewer than two observed cells or zero dispersion.
    """
    center = np.empty(X.p)
    scale = np.empty(X.p)
    for j in range(X.p):
        col = X.values[X.mask[:, j], j]
        if col.size < 2:
            raise DegenerateColumnError(
                f"column {j} has {col.size} observed cell(s); need at least 2"
            )
        center[j] = np.median(col)
        scale[j] = MAD_SCALE * np.median(np.abs(col - center[j]))
        if scale[j] == 0.0:
            raise DegenerateColumnError(f"column {j} has zero dispersion (MAD = 0)")
    return ColumnSummary(center, scale)


def load_csv(path, na_token: str = "NA", header: bool = False) -> DataMatrix:
    """Read a comma-separated numeric table into a DataMatrix.

    Cells whose content equals `na_token` (after stripping surrounding
    whitespace) are marked missing.  LF and CRLF line endings both work.
    When `header` is true the first row is skipped.

    Raises
    ------
    CsvParseError
        On unparseable cells (with row/column position), ragged rows, or
        fewer than two data rows.
    """
    with open(path, "r", newline="") as fh:
        return _parse_csv(fh, na_token, header, str(path))


def _parse_csv(fh, na_token: str, header: bool, name: str) -> DataMatrix:
    reader = csv.reader(fh)
    rows: list[list[float]] = []
    masks: list[list[bool]] = []
    width = None
    for lineno, record in enumerate(reader, start=1):
        if header and lineno == 1:
            continue
        if not record or (len(record) == 1 and record[0].strip() == ""):
            continue  # ignore blank lines
        if width is None:
            width = len(record)
        elif len(record) != width:
            raise CsvParseError(
                f"{name}: row {lineno} has {len(record)} fields, expected {width}"
            )
        vals, obs = [], []
        for colno, tok in enumerate(record):
            tok = tok.strip()
            if tok == na_token:
                vals.append(np.nan)
                obs.append(False)
                continue
            try:
                v = float(tok)
            except ValueError:
                raise CsvParseError(
                    f"{name}: cannot parse {tok!r} at row {lineno}, column {colno + 1}"
                ) from None
            if not np.isfinite(v):
                raise CsvParseError(
                    f"{name}: non-finite value {tok!r} at row {lineno}, column {colno + 1}"
                )
            vals.append(v)
            obs.append(True)
        rows.append(vals)
        masks.append(obs)
    if len(rows) < 2:
        raise CsvParseError(f"{name}: need at least 2 data rows, got {len(rows)}")
    return DataMatrix(np.array(rows), np.array(masks))


def loads_csv(text: str, na_token: str = "NA", header: bool = False) -> DataMatrix:
    """Parse CSV content from a string (convenience wrapper for tests/tools)."""
    return _parse_csv(io.StringIO(text), na_token, header, "<string>")


def write_csv(X: DataMatrix, path, na_token: str = "NA") -> None:
    """Serialize a DataMatrix back to CSV, writing `na_token` at masked cells."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for i in range(X.n):
            w.writerow(
                [repr(float(X.values[i, j])) if X.mask[i, j] else na_token for j in range(X.p)]
            )
