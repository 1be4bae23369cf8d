"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericsError -> 4.
"""


class SpanDistillError(Exception):
    """Base class for all package errors."""


class ConfigError(SpanDistillError):
    """Invalid configuration value or unusable combination of settings."""


class DataError(SpanDistillError):
    """Malformed or inconsistent input data."""


class NumericsError(SpanDistillError):
    """Numerical failure: shape mismatch, non-finite values, divergence."""


class ShapeError(NumericsError):
    """Operands with incompatible shapes; message names both shapes."""


class DegenerateInputError(DataError):
    """Input that leaves an operation undefined (e.g. a fully masked row)."""


class NotFittedEstimatorError(SpanDistillError):
    """Estimator used before fit()."""
