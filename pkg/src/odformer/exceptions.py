"""Exception hierarchy shared by every odformer module."""


class ODFormerError(Exception):
    """Base class for all package errors."""


class ShapeError(ODFormerError, ValueError):
    pass


class LengthError(ODFormerError, ValueError):
    pass


class ContractError(ODFormerError, RuntimeError):
    """A caller broke a documented precondition that is not a plain shape/value issue."""


class NoPeriodicityError(ODFormerError):
    """The detrended series carries no periodic component to extract."""


class ConfigError(ODFormerError, ValueError):
    pass


class DataError(ODFormerError, ValueError):
    """Malformed input data. ``line`` is the 1-based source line when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NoDataError(DataError):
    pass


class IntegrityError(ODFormerError):
    """A checkpoint or series file is truncated or corrupt."""


class VersionError(ODFormerError):
    pass
