"""Beam-fingerprint trajectory estimation and informed sampling-based planning."""

from .errors import (
    BFTError, FormatError, GenerationError, NumericError, ParameterError, SamplingError, TrainingError,
)

__version__ = "0.1.0"

__all__ = [
    "BFTError", "FormatError", "GenerationError", "NumericError", "ParameterError",
    "SamplingError", "TrainingError", "__version__",
]
