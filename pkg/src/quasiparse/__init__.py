"""Quasi-parametric human parsing.

Parses an image into per-pixel part labels by retrieving its nearest
annotated neighbors, scoring each neighbor's label regions against the query
with a matching network (confidence plus box displacements), transferring
the matched masks, and cleaning up the result with geodesic background
estimation and superpixel smoothing.
"""

from .errors import (
    CheckpointError,
    ConfigurationError,
    CorpusError,
    DataError,
    IndexFormatError,
    NumericError,
    QuasiparseError,
    TrainingError,
)

__version__ = "0.1.0"

__all__ = [
    "QuasiparseError",
    "ConfigurationError",
    "DataError",
    "CorpusError",
    "CheckpointError",
    "IndexFormatError",
    "NumericError",
    "TrainingError",
    "__version__",
]
