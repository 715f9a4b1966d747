"""Exception hierarchy shared by every module.

Each class carries the process exit code the CLI maps it to.
"""


class BandRouteError(Exception):
    exit_code = 1


class ConfigError(BandRouteError, ValueError):
    """Invalid configuration (band layout, channel counts, CLI options)."""

    exit_code = 2


class ShapeError(ConfigError):
    """Operand dimensions are incompatible for an operation."""


class DataError(BandRouteError, ValueError):
    """Malformed, degenerate or truncated input data."""

    exit_code = 3


class CheckpointError(DataError):
    pass


class NumericFault(BandRouteError, ArithmeticError):
    """A NaN/Inf appeared where finite values are required."""

    exit_code = 4


class TapeError(BandRouteError, RuntimeError):
    """Misuse of the gradient tape (e.g. backward from a foreign tensor)."""


class InfiniteSNRError(DataError):
    """Raised when a residual has zero power so an SNR would be infinite."""
