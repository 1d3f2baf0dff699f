"""Exception hierarchy shared across the package."""


class AddvError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(AddvError):
    """Operands have incompatible shapes; the message reports both."""


class NonFiniteError(AddvError):
    """An operation produced or encountered NaN/Inf values."""


class CheckpointError(AddvError):
    """Checkpoint file is missing, malformed, or fails its content hash."""


class DatasetError(AddvError):
    """Dataset directory or one of its files is missing or ill-formed."""


class DivergenceError(AddvError):
    """Training produced a non-finite loss; the last good checkpoint is kept."""


class VerificationError(AddvError):
    """A gradient or consistency check failed."""
