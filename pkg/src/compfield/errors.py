"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
NumericError -> 3.
"""


class CompfieldError(Exception):
    """Base class for package-specific errors."""


class ConfigError(CompfieldError):
    """Invalid configuration, flags, or preset/covariate selection."""


class DataError(CompfieldError):
    """Malformed or inconsistent input data."""


class NumericError(CompfieldError):
    """Numerical failure (factorization breakdown, non-finite density)."""


class InsufficientSamplesError(CompfieldError):
    """Too few retained samples for the requested summary."""
