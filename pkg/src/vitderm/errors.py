"""Exception hierarchy shared by every vitderm module."""


class VitDermError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(VitDermError, ValueError):
    """Shapes of operands are incompatible."""


class ConfigurationError(VitDermError, ValueError):
    """An unknown option or an out-of-range hyperparameter."""


class DataError(VitDermError, ValueError):
    """Malformed input data (metadata rows, labels, one-hot vectors, ids)."""


class NonFiniteError(VitDermError, FloatingPointError):
    """A NaN or Inf was produced or supplied where finite values are required."""


class UsageError(VitDermError, RuntimeError):
    """An API was called in a state where it is not meaningful."""


class WeightFormatError(VitDermError, ValueError):
    """A weight container is corrupt, truncated, or does not match a config."""


class UndefinedRecallError(VitDermError, ZeroDivisionError):
    """Recall requested for a class that has no actual positives."""


class TrainingDivergedError(VitDermError, FloatingPointError):
    def __init__(self, epoch: int, batch: int, loss: float):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")
