"""Exception hierarchy shared across the package.

CLI exit-code mapping: ConfigError/DataError/FormatError/ShapeError are
usage or input problems (exit 2); check failures are reported by the
command itself (exit 1).
"""


class CanetError(Exception):
    """Base class for all package errors."""


class ShapeError(CanetError):
    """Tensor extents violate an operation's precondition."""


class ContractError(CanetError):
    """An API contract was violated (non-scalar loss, metrics on an empty matrix, ...)."""


class ConfigError(CanetError):
    """Invalid or inconsistent configuration."""


class DataError(CanetError):
    """Malformed input data (out-of-range labels, bad sample files)."""


class FormatError(CanetError):
    """Malformed serialized file (bad magic, truncation, unknown entry)."""


class TrainingError(CanetError):
    """Training diverged or produced non-finite values."""
