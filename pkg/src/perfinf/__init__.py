"""Statistical inference for repeated risk minimization under performativity."""

from perfinf.errors import ConfigError, NumericalError, SamplingError, SolverError
from perfinf.model import Dataset, LabeledSample, ModelParams, default_setting

__all__ = [
    "ConfigError",
    "Dataset",
    "LabeledSample",
    "ModelParams",
    "NumericalError",
    "SamplingError",
    "SolverError",
    "default_setting",
]

__version__ = "0.1.0"
