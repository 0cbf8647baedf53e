"""Exception types shared across the package."""


class SemiseError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(SemiseError):
    """Array shapes do not satisfy an operation's contract."""


class DegenerateInputError(SemiseError):
    """An input is numerically unusable, e.g. a zero-norm embedding row."""


class ConfigError(SemiseError):
    """A configuration value or file is invalid."""


class DataError(SemiseError):
    """A dataset cannot support the requested operation."""


class FormatError(SemiseError):
    """An on-disk artifact is malformed (bad magic, version, or payload)."""


class ContractError(SemiseError):
    """An API was used in a way its contract forbids (e.g. unfrozen encoder)."""


class UndefinedMetricError(SemiseError):
    """A metric has no defined value for the given inputs."""
