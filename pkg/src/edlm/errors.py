"""Exception hierarchy shared by every module.

Each class maps onto one CLI exit code, see ``edlm.cli.EXIT_CODES``.
"""


class EdlmError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(EdlmError, ValueError):
    """Invalid or inconsistent configuration."""


class ShapeError(ConfigError):
    """Tensor shapes do not agree."""


class DataError(EdlmError, ValueError):
    """Malformed training data or an unusable document."""


class NumericError(EdlmError, ArithmeticError):
    """A non-finite value was produced."""


class FormatError(EdlmError, ValueError):
    """A file does not follow its binary layout."""


class ChecksumError(FormatError):
    pass


class VersionError(FormatError):
    pass
