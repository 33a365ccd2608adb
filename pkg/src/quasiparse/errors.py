"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes (see cli.py): configuration and usage
problems exit 1, unusable data exits 2, numeric failures exit 3.
"""


class QuasiparseError(Exception):
    """Base class for all package errors."""


class ConfigurationError(QuasiparseError):
    """Invalid configuration: bad shapes, unknown keys, impossible layer sizes."""


class DataError(QuasiparseError):
    """Corpus, checkpoint, or index content that cannot be used."""


class CorpusError(DataError):
    """Corpus directory, manifest, or raster problems."""


class CheckpointError(DataError):
    """Unreadable, truncated, or shape-mismatched checkpoint files."""


class IndexFormatError(DataError):
    """Malformed retrieval index cache files."""


class NumericError(QuasiparseError):
    """Non-finite values where finite math was required."""


class TrainingError(NumericError):
    """Optimization failure, e.g. divergence during training."""
