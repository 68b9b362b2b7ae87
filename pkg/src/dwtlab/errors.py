"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2,
IncompatibilityError -> 3, NumericError -> 4.
"""


class DwtError(Exception):
    """Base class for dwtlab errors."""


class ConfigError(DwtError):
    """Invalid or malformed configuration."""


class DataError(DwtError):
    """Corpus or batch construction failure."""


class ShapeError(DwtError):
    """Tensor dimension mismatch."""


class IncompatibilityError(DwtError):
    """Teacher and student architectures cannot be remapped."""


class NumericError(DwtError):
    """Non-finite value where a finite one is required."""


class CheckpointError(DwtError):
    """Malformed or corrupted checkpoint file."""
