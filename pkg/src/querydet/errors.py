"""Exception types shared across the package.

``UserInputError`` subclasses mark problems a caller can fix (bad files,
incompatible shapes, invalid configuration); the CLI maps them to exit
code 2. Everything else bubbles up as an internal error (exit code 1).
"""


class QuerydetError(Exception):
    """Base class for all errors raised by this package."""


class UserInputError(QuerydetError):
    """Invalid input the caller can correct (file, image, config)."""


class WeightsFormatError(UserInputError):
    """Weights bundle file is missing tensors, malformed, or truncated."""


class ImageFormatError(UserInputError):
    """Input raster is not 8-bit RGB or cannot be decoded."""


class ShapeMismatchError(QuerydetError):
    """Arrays or windows with incompatible dimensions."""


class ConfigError(UserInputError):
    """Invalid run or corpus configuration."""


class SchemaError(UserInputError):
    """A structured document violates its schema; message names the field."""
