"""Exception taxonomy shared across the package.

The CLI maps ConfigError to exit code 1 and DataError (and subclasses)
to exit code 2.
"""


class FaninError(Exception):
    """Base class for all package errors."""


class ConfigError(FaninError):
    """Invalid configuration: bad hyperparameter, unknown key, bad mode."""


class DataError(FaninError):
    """Problem with input data."""


class ParseError(DataError):
    """Malformed dataset file; carries a 1-based line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class RangeError(DataError):
    """An id in the data is outside its declared range."""


class ShapeError(FaninError):
    """Array shapes or dimensions do not conform."""
