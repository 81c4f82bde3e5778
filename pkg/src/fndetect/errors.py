"""Exception types shared across the package."""


class DimensionError(ValueError):
    """A tensor shape does not fit the operator.

    ``axis`` names the offending axis (``"channel"``, ``"height"``, ...).
    """

    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class ConfigError(ValueError):
    """Invalid layer or graph configuration."""


class TapeError(RuntimeError):
    """Gradient requested for a computation that was never recorded."""


class NumericError(FloatingPointError):
    """NaN or Inf encountered."""


class ParseError(ValueError):
    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)
        self.path = path
        self.line = line
