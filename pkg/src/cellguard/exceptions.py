"""Exception types raised by the cellguard library."""


class CellguardError(Exception):
    """Base class for all errors raised by this package."""


class CsvParseError(CellguardError):
    """Malformed CSV input (bad token, ragged row, too few rows)."""


class DegenerateColumnError(CellguardError):
    """A column has too few observed cells or zero dispersion."""


class DegenerateDataError(CellguardError):
    """Data carries no usable information for the requested computation."""


class SingularityError(CellguardError):
    """A matrix that must be positive definite is (numerically) singular."""


class ConvergenceError(CellguardError):
    """An iterative procedure failed to converge within its bounds."""
