"""Exception hierarchy shared by every stage of the pipeline."""


class ScreenpipeError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(ScreenpipeError, ValueError):
    """Operand shapes or image sizes are incompatible."""


class ConfigError(ScreenpipeError, ValueError):
    """A configuration value is outside its allowed range."""


class StateError(ScreenpipeError, RuntimeError):
    """An operation was called in the wrong order (e.g. backward before forward)."""


class ChannelError(DimensionError):
    """Image has the wrong number of channels for the operation."""


class UndefinedMetricError(ScreenpipeError, ZeroDivisionError):
    """A metric's denominator is zero, so the value is undefined."""


class DataError(ScreenpipeError, ValueError):
    """Input samples violate a data contract (missing mask, id mismatch, ...)."""


class EmptyDatasetError(DataError):
    """A dataset scan produced no usable samples."""


class QuotaError(DataError):
    """A split cannot be filled with the samples available."""


class DependencyError(ScreenpipeError, FileNotFoundError):
    """A pipeline stage is missing an artifact produced by an earlier stage."""


class ContractError(ScreenpipeError, RuntimeError):
    """A precondition on a network's structure was violated."""


class TrainingDivergedError(ScreenpipeError, FloatingPointError):
    """Training produced a non-finite loss."""
