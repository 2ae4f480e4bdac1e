"""Exception types shared across the package.

The CLI maps each class onto a process exit code.
"""


class DcalError(Exception):
    """Base class for all package errors."""


class ConfigError(DcalError, ValueError):
    """Invalid configuration, arguments or network/parameter mismatch."""


class DataError(DcalError):
    """Missing, unreadable or inconsistent input data."""


class NumericError(DcalError, ArithmeticError):
    """A computation produced non-finite values."""


class GraphError(DcalError, RuntimeError):
    """Misuse of the differentiation graph (non-scalar root, reuse, cycles)."""
