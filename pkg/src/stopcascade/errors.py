"""Exception types shared across the package.

The CLI maps these onto its exit-code contract: ConfigError -> 1,
DataFormatError -> 2, NumericError -> 3.
"""


class StopCascadeError(Exception):
    """Base class for all package errors."""


class ConfigError(StopCascadeError):
    """Invalid configuration, option value, or precondition."""


class DataFormatError(StopCascadeError):
    """Malformed input data; message carries the byte offset or line number."""


class NumericError(StopCascadeError):
    """Non-finite values, divergence, or a failed numeric check."""


class ContractViolation(StopCascadeError):
    """An internal API contract was broken (stale cache, bad probability)."""


class SizeGuardError(ConfigError):
    """An enumeration guard was exceeded; the instance is too large."""


class CalibrationError(ConfigError):
    """Budget calibration cannot proceed (infeasible budget or bad bracket)."""
