"""Supervised anomaly detection for photometric time series.

A random forest trained on light-curve features produces per-object
class-vote vectors; a discrete Bayesian network models the joint
distribution of those votes, and objects with improbable vote patterns
are flagged as outlier candidates.
"""

__version__ = "0.1.0"

from .errors import (
    InvalidArgument,
    IoError,
    LcAnomalyError,
    MalformedInput,
    NotFound,
    StageError,
)

__all__ = [
    "InvalidArgument",
    "IoError",
    "LcAnomalyError",
    "MalformedInput",
    "NotFound",
    "StageError",
    "__version__",
]
