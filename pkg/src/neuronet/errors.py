"""Exception hierarchy shared by all neuronet modules."""


class NeuroNetError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(NeuroNetError, ValueError):
    """Invalid model, training or phantom configuration."""


class UsageError(NeuroNetError, ValueError):
    """An API was called with arguments that violate its contract."""


class InputError(NeuroNetError, ValueError):
    """Input data has an incompatible shape or geometry."""


class DataError(NeuroNetError, ValueError):
    """Input data contains invalid values (e.g. out-of-range labels)."""


class FormatError(NeuroNetError, ValueError):
    """A file does not follow the expected on-disk format."""


class NumericError(NeuroNetError, ArithmeticError):
    """A computation produced NaN or infinite values."""


class PipelineError(NeuroNetError, RuntimeError):
    """The data pipeline stalled or failed."""


class InternalError(NeuroNetError, RuntimeError):
    """An internal invariant was violated."""
