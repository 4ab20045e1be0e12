"""Exception types raised across the package."""


class IckdError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(IckdError, ValueError):
    pass


class ConfigError(IckdError, ValueError):
    pass


class DegenerateBatchError(IckdError, ValueError):
    """Batch statistics requested over fewer than two values per channel."""


class GridIndivisibleError(ShapeError):
    pass


class FormatError(IckdError, ValueError):
    """A file on disk does not follow the expected binary layout."""


class NonFiniteError(IckdError, FloatingPointError):
    pass


class OracleError(IckdError, RuntimeError):
    pass
