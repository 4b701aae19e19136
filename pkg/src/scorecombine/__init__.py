"""Fuse several inlier scores into one out-of-distribution decision.

Scores are mapped to empirical z-values, combined with a GLRT for the
negative-means problem (or a classical p-value combiner), and thresholded
with conformal p-values that carry a finite-sample false-alarm guarantee.
"""

__version__ = "0.1.0"

from scorecombine.errors import (
    DataError,
    DegenerateDistributionError,
    DomainError,
    NumericError,
    SchemaError,
)

__all__ = [
    "__version__",
    "DataError",
    "DegenerateDistributionError",
    "DomainError",
    "NumericError",
    "SchemaError",
]
