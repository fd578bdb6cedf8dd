"""Robust multivariate location and scatter under cellwise/casewise outliers.

The package centers on a two-step estimator: an adaptive univariate filter
turns large cellwise outliers into missing values, and a generalized
S-estimator fits location and scatter to the resulting incomplete data.
Around it sit the classical Gaussian EM baseline, a Monte Carlo evaluation
harness, and multiplicity-adjusted outlier diagnostics, all exposed both as
a library and through the ``cellguard`` command line tool.
"""

__version__ = "0.1.0"

from .data import (
    ColumnSummary,
    DataMatrix,
    column_summaries,
    load_csv,
    loads_csv,
    write_csv,
)
from .distributions import chi2_cdf, chi2_quantile, normal_cdf, normal_quantile
from .exceptions import (
    CellguardError,
    ConvergenceError,
    CsvParseError,
    DegenerateColumnError,
    DegenerateDataError,
    SingularityError,
)
from .gyfilter import FilterConfig, FilterResult, adaptive_cutoff, apply_filter, flag_proportion
from .mscale import (
    RhoConfig,
    ScaleProblem,
    TuningTable,
    generalized_mscale,
    partial_mahalanobis,
    rho,
    rho_weight,
    tuning_constant,
)
from .estimators import Estimate, GseConfig, em_mle, emve_init, gse_fit, tsgs
from .simulation import (
    ContaminationSpec,
    SimConfig,
    SimReport,
    TrueModel,
    contaminate_icm,
    contaminate_thcm,
    lrt_distance,
    random_correlation,
    run_simulation,
)
from .diagnostics import DiagReport, diagnose

__all__ = [
    "__version__",
    "DataMatrix",
    "ColumnSummary",
    "column_summaries",
    "load_csv",
    "loads_csv",
    "write_csv",
    "normal_cdf",
    "normal_quantile",
    "chi2_cdf",
    "chi2_quantile",
    "FilterConfig",
    "FilterResult",
    "flag_proportion",
    "adaptive_cutoff",
    "apply_filter",
    "RhoConfig",
    "TuningTable",
    "ScaleProblem",
    "rho",
    "rho_weight",
    "tuning_constant",
    "partial_mahalanobis",
    "generalized_mscale",
    "Estimate",
    "GseConfig",
    "em_mle",
    "emve_init",
    "gse_fit",
    "tsgs",
    "TrueModel",
    "ContaminationSpec",
    "SimConfig",
    "SimReport",
    "random_correlation",
    "contaminate_icm",
    "contaminate_thcm",
    "lrt_distance",
    "run_simulation",
    "DiagReport",
    "diagnose",
    "CellguardError",
    "CsvParseError",
    "DegenerateColumnError",
    "DegenerateDataError",
    "SingularityError",
    "ConvergenceError",
]
