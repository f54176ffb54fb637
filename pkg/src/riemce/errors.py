"""Exception types shared across the package."""


class RiemceError(Exception):
    """Base class for all package errors."""


class ShapeError(RiemceError):
    """Array dimensions do not match the declared contract."""


class ConfigError(RiemceError):
    """Invalid configuration or unusable input arguments."""


class StateError(RiemceError):
    """Operation called out of order (e.g. backprop before a train forward)."""


class NumericError(RiemceError):
    """Non-finite values encountered where finite numbers are required."""


class SingularMetricError(RiemceError):
    """Metric factorization failed even at the maximum jitter."""


class SchemaError(ConfigError):
    """Input table does not match the expected schema."""
