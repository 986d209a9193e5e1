"""Exception hierarchy shared by all modules."""


class GamcovError(Exception):
    """Base class for every error raised by the package."""


class InvalidDimensionError(GamcovError, ValueError):
    pass


class ShapeError(GamcovError, ValueError):
    pass


class DataError(GamcovError, ValueError):
    pass


class InsufficientDataError(DataError):
    pass


class ParameterRangeError(GamcovError, OverflowError):
    """A linear predictor is too large for ``exp`` to be represented."""


class NumericError(GamcovError, ArithmeticError):
    """Linear algebra failure; ``row`` carries the observation index if known."""

    def __init__(self, message, row=None):
        if row is not None:
            message = f"{message} (observation {row})"
        super().__init__(message)
        self.row = row


class ConfigurationError(GamcovError, ValueError):
    pass


class UnsupportedOperationError(GamcovError, NotImplementedError):
    pass


class InitializationError(GamcovError, ValueError):
    pass


class LineSearchError(GamcovError, RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
