"""Exception types shared across the package.

The CLI maps the three coarse categories onto exit codes:
ConfigError -> 2, DataError -> 3, CheckpointError -> 4.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class DataError(RuntimeError):
    """Missing or malformed dataset files."""


class CheckpointError(RuntimeError):
    """Missing, corrupt, or incompatible checkpoint."""


class TimestepRangeError(ValueError):
    """Timestep index outside [1, T]."""


class ShapeMismatchError(ValueError):
    """Array arguments disagree on shape."""


class UnknownBlockError(KeyError):
    """Requested decoder block index does not exist."""


class ChannelMismatchError(ValueError):
    """Feature channel count does not match a network's input width."""


class EmptyMaskError(ValueError):
    """An operation that averages over mask pixels got an empty mask."""
