"""Exception hierarchy shared by all racs modules."""


class RacsError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(RacsError, ValueError):
    """Array shapes do not line up."""


class NumericError(RacsError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class SingularityError(NumericError):
    """A Gram matrix could not be factorized even after regularization."""


class StaleTapeError(RacsError, RuntimeError):
    """A tape was replayed against parameters that changed since the forward pass."""


class RangeError(RacsError, ValueError):
    """A prefix length, label or signal is outside its admissible range."""


class FormatError(RacsError, ValueError):
    """A file on disk is malformed, truncated or of an unsupported version."""


class TrainingDiverged(NumericError):
    """Loss stayed non-finite for too many consecutive steps.

    ``last_good`` holds a checkpoint of the parameters before divergence.
    """

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good
