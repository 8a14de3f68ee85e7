"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ``DataError`` subclasses exit 2,
``OSError`` exits 3.
"""


class DisasterStackError(Exception):
    """Base class for all package errors."""


class DataError(DisasterStackError, ValueError):
    """Input data violates a contract (bad shapes, labels, files)."""


class ShapeError(DataError):
    """Tensor or layer dimensions are incompatible."""


class CheckpointError(DataError):
    """A checkpoint or model file cannot be read back."""


class TrainingError(DisasterStackError, RuntimeError):
    """Training was aborted (non-finite loss, failed checkpoint write)."""
