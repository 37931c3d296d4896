"""Connected double U-Net mass segmentation for whole mammograms.

Numpy implementation of the ConnectedUNets+ and ConnectedUNets++
architectures with residual skip connections and atrous pyramid pooling,
plus the preprocessing, training, and evaluation machinery around them.
Hot kernels optionally run through numba (see ``cunets.backend``).
"""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    CheckpointError,
    ConfigurationError,
    CunetsError,
    InputError,
    TrainingDiverged,
)
from .models import VARIANTS, ModelGraph, build_model, count_params  # noqa: F401
from .schedule import FilterSchedule  # noqa: F401
