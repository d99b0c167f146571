"""Exception hierarchy shared by every subpackage.

The CLI maps these onto exit codes (see ``siamgap.cli.EXIT_CODES``).
"""


class SiamGapError(Exception):
    """Base class for all package errors."""


class UsageError(SiamGapError):
    """API misuse, e.g. calling backward twice on the same tape."""


class ConfigError(SiamGapError, ValueError):
    """Invalid configuration or hyper-parameter."""


class DataError(SiamGapError, ValueError):
    """Malformed, missing or insufficient data."""


class LabelError(DataError):
    """A grade label outside the supported set."""


class GeometryError(DataError):
    """Degenerate crop box or out-of-bounds region."""


class DimensionError(SiamGapError, ValueError):
    """Tensor shape mismatch."""


class NumericError(SiamGapError, ArithmeticError):
    """Non-finite values where finite ones are required."""
