"""Exception types shared across the package.

The CLI maps these onto process exit codes; see `rulcast.cli`.
"""


class RulcastError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(RulcastError, ValueError):
    """Shapes do not line up for the requested operation."""


class ConfigError(RulcastError, ValueError):
    """A configuration value violates one of its invariants."""


class UsageError(RulcastError, RuntimeError):
    """An API was called outside its contract."""


class DataError(RulcastError, ValueError):
    """Input data violates the dataset contract."""


class FormatError(RulcastError, ValueError):
    """A file does not match its expected format."""


class MetricError(RulcastError, ValueError):
    """A metric is undefined for the given inputs."""


class NumericsError(RulcastError, ArithmeticError):
    """Training or evaluation produced non-finite values."""
