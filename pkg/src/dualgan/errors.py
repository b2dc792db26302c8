"""Exception hierarchy shared by every module."""


class DualGanError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(DualGanError, ValueError):
    pass


class ShapeError(DualGanError, ValueError):
    pass


class NumericError(DualGanError, ArithmeticError):
    pass


class DegenerateInputError(DualGanError, ValueError):
    pass


class FormatError(DualGanError, ValueError):
    pass


class UnlabeledFallbackWarning(UserWarning):
    """No identified anomalies: a detector degraded to unsupervised mode."""
