"""Outlier identification against a fitted location/scatter estimate.

Given a complete data table and an estimate, three families of squared
distances are compared with chi-square cutoffs whose confidence level is
adjusted for the number of comparisons made:

* cellwise:  (x_ij - mu_j)^2 / Sigma_jj        vs chi2(conf^(1/(n p)), 1)
* pairwise:  2-D Mahalanobis of (x_ij, x_ik)   vs chi2(conf^(2/(n p (p-1))), 2)
* casewise:  full p-D Mahalanobis              vs chi2(conf^(1/n), p)

All distances use sub-blocks of the single global estimate; nothing is
refitted per pair.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .data import DataMatrix
from .distributions import chi2_quantile
from .estimators import Estimate
from .exceptions import CellguardError, SingularityError

__all__ = ["DiagReport", "diagnose"]


@dataclass(frozen=True)
class DiagReport:
    """Flag proportions, thresholds, and flagged index lists."""

    cell_prop: float
    pair_prop: float
    case_prop: float
    thresholds: dict
    flagged_cells: tuple
    flagged_pairs: tuple
    flagged_cases: tuple
    n: int
    p: int
    conf: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "n": self.n,
                "p": self.p,
                "conf": self.conf,
                "proportions": {
                    "cell": self.cell_prop,
                    "pair": self.pair_prop,
                    "case": self.case_prop,
                },
                "thresholds": self.thresholds,
                "flagged_cells": [[int(i), int(j)] for i, j in self.flagged_cells],
                "flagged_pairs": [[int(i), int(j), int(k)] for i, j, k in self.flagged_pairs],
                "flagged_cases": [int(i) for i in self.flagged_cases],
            },
            sort_keys=True,
        )

    def flagged_cells_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row", "col"])
        for i, j in self.flagged_cells:
            w.writerow([i, j])
        return buf.getvalue()


def diagnose(X: DataMatrix, est: Estimate, conf: float = 0.99) -> DiagReport:
    """Flag cells, pairs, and cases whose distance exceeds its threshold.

    Requires complete data (impute or subset first) and an estimate whose
    dimension matches.  Thresholds use per-family confidence levels
    raised to one over the number of comparisons, so on data that actually
    follows the estimate the expected total number of flags stays near
    1 - conf regardless of n and p.
    """
    if not X.complete:
        raise CellguardError(
            "diagnosis requires complete data; impute or subset the missing cells first"
        )
    if est.p != X.p:
        raise CellguardError(f"estimate dimension {est.p} != data dimension {X.p}")
    mu = est.mu
    sigma = est.sigma
    diag = np.diag(sigma)
    if np.any(diag <= 0.0):
        raise SingularityError("estimate scatter has non-positive diagonal entries")
    try:
        np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        raise SingularityError("estimate scatter is not positive definite") from None

    n, p = X.shape
    n_cell = n * p
    n_pair = n * p * (p - 1) // 2
    thr_cell = float(chi2_quantile(conf ** (1.0 / (n * p)), 1))
    thr_pair = float(chi2_quantile(conf ** (2.0 / (n * p * (p - 1))), 2))
    thr_case = float(chi2_quantile(conf ** (1.0 / n), p))

    diffs = X.values - mu

    cell_d = diffs**2 / diag
    cells = [(int(i), int(j)) for i, j in np.argwhere(cell_d > thr_cell)]

    pairs = []
    for j in range(p):
        for k in range(j + 1, p):
            sub = sigma[np.ix_((j, k), (j, k))]
            det = sub[0, 0] * sub[1, 1] - sub[0, 1] ** 2
            if det <= 0.0:
                raise SingularityError(f"2x2 scatter submatrix for pair ({j}, {k}) is singular")
            inv = np.array([[sub[1, 1], -sub[0, 1]], [-sub[0, 1], sub[0, 0]]]) / det
            dj, dk = diffs[:, j], diffs[:, k]
            d2 = inv[0, 0] * dj**2 + 2.0 * inv[0, 1] * dj * dk + inv[1, 1] * dk**2
            pairs.extend((int(i), j, k) for i in np.flatnonzero(d2 > thr_pair))
    pairs.sort(key=lambda t: (t[1], t[2], t[0]))

    full = np.einsum("ij,ij->i", diffs @ np.linalg.inv(sigma), diffs)
    cases = [int(i) for i in np.flatnonzero(full > thr_case)]

    return DiagReport(
        cell_prop=len(cells) / n_cell,
        pair_prop=len(pairs) / n_pair,
        case_prop=len(cases) / n,
        thresholds={"cell": thr_cell, "pair": thr_pair, "case": thr_case},
        flagged_cells=tuple(cells),
        flagged_pairs=tuple(pairs),
        flagged_cases=tuple(cases),
        n=n,
        p=p,
        conf=conf,
    )
