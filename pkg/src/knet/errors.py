"""Exception taxonomy shared by all knet modules."""


class KnetError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(KnetError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(KnetError):
    """Non-finite values where finite ones are required."""


class ContractError(KnetError):
    """An API was called outside its documented preconditions."""


class ConfigError(KnetError):
    """Invalid configuration value or combination."""


class CapacityError(KnetError):
    """Fewer predictions than targets; assignment is impossible."""


class DataError(KnetError):
    """Inconsistent ground-truth or segment tables."""


class FormatError(DataError):
    """On-disk data does not parse as the expected format."""


class ChecksumError(DataError):
    """Stored checksum does not match file contents."""


class GenerationError(KnetError):
    """Scene synthesis could not satisfy its constraints."""


class ParameterError(KnetError):
    """Degenerate shape parameters (e.g. sub-pixel radius)."""


class TrainingError(KnetError):
    """Optimization failure, e.g. non-finite loss or gradient."""
