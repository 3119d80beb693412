"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Array shape does not match an operator's domain or range."""


class StateError(RuntimeError):
    """An object is used before a required precomputation step."""


class DivergenceError(ArithmeticError):
    """An iterative scheme blew up."""

    def __init__(self, message, stepsize=None):
        super().__init__(message)
        self.stepsize = stepsize


class TrainingFault(FloatingPointError):
    """Non-finite values appeared during training or loss evaluation."""

    def __init__(self, message, batch_seed=None):
        super().__init__(message)
        self.batch_seed = batch_seed


class CorruptionError(IOError):
    """Stored data no longer matches the hashes recorded in its manifest."""


class ManifestError(ValueError):
    """A dataset manifest is malformed or internally inconsistent."""


class StatisticsError(ValueError):
    """Not enough samples to compute a requested statistic."""
