"""Exception types shared across the package."""


class FeddivError(Exception):
    """Base class for all package errors."""


class ShapeError(FeddivError):
    """Operand shapes are incompatible for the requested operation."""


class InputError(FeddivError):
    """Caller supplied invalid data (bad labels, empty dataset, ...)."""


class ConfigError(FeddivError):
    """Invalid or inconsistent configuration."""


class UninitializedStatisticsError(FeddivError):
    """Global BN statistics were read before being set."""


class ProtocolError(FeddivError):
    """Federation protocol violation (empty participant set, shape drift)."""


class CheckpointError(FeddivError):
    """Checkpoint file is corrupt or has an unsupported version."""
