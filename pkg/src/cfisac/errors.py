"""Exception types shared across the package."""


class CfisacError(Exception):
    """Base class for all package errors."""


class ConfigError(CfisacError, ValueError):
    """Invalid or inconsistent configuration."""


class GeometryError(CfisacError, ValueError):
    """Degenerate geometry, e.g. coincident AP and agent positions."""


class DataMismatchError(CfisacError):
    """An artifact (dataset, checkpoint, ceilings) does not match the requested setup."""


class NumericError(CfisacError, ArithmeticError):
    """Training or optimization produced non-finite values."""
