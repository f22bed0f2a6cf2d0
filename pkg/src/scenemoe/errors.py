"""Error types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible. The message names both shapes."""


class ConfigError(ValueError):
    """A configuration value is out of range or inconsistent."""


class DataError(ValueError):
    """An input record, file or label violates its contract."""


class StateError(RuntimeError):
    """An operation was invoked before its prerequisites exist."""


class CheckpointVersionError(StateError):
    """A checkpoint file was written by an incompatible format version."""


class NumericError(ArithmeticError):
    """A numeric routine produced or encountered a non-finite value."""


class TrainingDiverged(RuntimeError):
    """The training loss became non-finite."""
