"""Mislabeled-sample detection learned from training dynamics."""

from dyndetect.dynamics import DynamicsTable, LabeledDataset, read_dynamics, resample_sequence, write_dynamics
from dyndetect.errors import (
    ConfigError,
    DivergenceError,
    InvalidArgumentError,
    ParseError,
    UndefinedMetricError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DivergenceError",
    "DynamicsTable",
    "InvalidArgumentError",
    "LabeledDataset",
    "ParseError",
    "UndefinedMetricError",
    "read_dynamics",
    "resample_sequence",
    "write_dynamics",
]
