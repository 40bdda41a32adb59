"""Exception hierarchy shared across the package.

The CLI maps each family onto an exit code, so new errors should subclass
one of the three roots below rather than ``Exception`` directly.
"""


class TubeletError(Exception):
    exit_code = 1


class ConfigError(TubeletError, ValueError):
    """Invalid configuration: bad extents, unknown keys, inconsistent variant."""

    exit_code = 2


class DimensionError(ConfigError):
    """Operand shapes are incompatible for the requested operation."""


class DataError(TubeletError):
    exit_code = 3


class FormatError(DataError):
    """A binary container or checkpoint could not be decoded."""


class TruncatedFileError(FormatError):
    pass


class BadMagicError(FormatError):
    pass


class CRCMismatchError(FormatError):
    pass


class ExtentOverflowError(FormatError):
    pass


class GenerationError(DataError):
    """Synthetic data generation could not satisfy its constraints."""


class NumericalError(TubeletError, ArithmeticError):
    exit_code = 4
