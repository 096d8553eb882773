"""Monolithic multimodal transformer with statically routed modality experts."""

import warnings

warnings.filterwarnings("ignore", message=".*TBB.*")

from .exceptions import (ChecksumError, ConfigError, DimensionError, InputError,  # noqa: E402
                         MonoVLError, NonFiniteError, ProbeError, TrainingDiverged)

__version__ = "0.1.0"

__all__ = ["ChecksumError", "ConfigError", "DimensionError", "InputError", "MonoVLError",
           "NonFiniteError", "ProbeError", "TrainingDiverged", "__version__"]
