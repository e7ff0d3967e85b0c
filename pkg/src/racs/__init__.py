"""Rate-adaptive compressive sensing.

A learned measurement matrix whose every row prefix, paired with its own
pseudoinverse decoder and one shared reconstruction or classification
network, forms a working sensing system.
"""

from .errors import (DimensionError, FormatError, NumericError, RacsError, RangeError, SingularityError,
                     StaleTapeError, TrainingDiverged)
from .sensing import MeasurementMatrix, gaussian_init
from .models import ModelSpec, build_model
from .training import TrainConfig, run_rate_adaptive, train_vanilla
from .evaluation import psnr, sweep_rates

__version__ = "0.1.0"

__all__ = [
    "DimensionError", "FormatError", "MeasurementMatrix", "ModelSpec", "NumericError", "RacsError",
    "RangeError", "SingularityError", "StaleTapeError", "TrainConfig", "TrainingDiverged", "build_model",
    "gaussian_init", "psnr", "run_rate_adaptive", "sweep_rates", "train_vanilla",
]
