"""Exception hierarchy shared by every module."""


class S2CastError(Exception):
    """Base class for all package errors."""


class ShapeError(S2CastError, ValueError):
    pass


class ConfigError(S2CastError, ValueError):
    pass


class DataError(S2CastError, ValueError):
    pass


class UsageError(S2CastError, RuntimeError):
    """A layer cache was missing, stale, or paired with the wrong layer."""


class FormatError(S2CastError, ValueError):
    """A model or dataset container could not be decoded."""


class NumericalError(S2CastError, ArithmeticError):
    """A kernel produced NaN or Inf from finite inputs."""


class TrainingError(S2CastError, RuntimeError):
    def __init__(self, message, batch_index=None, epoch=None):
        super().__init__(message)
        self.batch_index = batch_index
        self.epoch = epoch


class SpecMismatchError(ConfigError):
    """Model and dataset disagree on features or normalization."""
