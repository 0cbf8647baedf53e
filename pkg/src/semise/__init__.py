"""Severity representation learning on a synthetic ordinal imaging benchmark.

Two-phase training (healthy/anomaly discrimination, then combined view
contrast + reference-anchored preference optimization) with downstream
classification, segmentation and embedding-ordering probes.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DegenerateInputError,
    DimensionError,
    FormatError,
    SemiseError,
    UndefinedMetricError,
)
from .ndcore import (
    GradCheckReport,
    Rng,
    cosine_distance,
    finite_diff_check,
    matmul,
    sigmoid,
    softmax,
)

__all__ = [
    "ConfigError",
    "ContractError",
    "DataError",
    "DegenerateInputError",
    "DimensionError",
    "FormatError",
    "SemiseError",
    "UndefinedMetricError",
    "GradCheckReport",
    "Rng",
    "cosine_distance",
    "finite_diff_check",
    "matmul",
    "sigmoid",
    "softmax",
]
