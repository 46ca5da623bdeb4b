"""Exception types shared across the package."""


class QAuctionError(Exception):
    """Base class for all package-specific errors."""


class InvalidInputError(QAuctionError, ValueError):
    """An argument violates a documented precondition."""


class UnsupportedSizeError(QAuctionError, ValueError):
    """The instance is too large for an exact method."""


class UndefinedCorrelationError(QAuctionError, ValueError):
    """A correlation is undefined (e.g. constant input)."""


class CheckpointError(QAuctionError, RuntimeError):
    """A checkpoint file is unreadable or corrupt."""


class CheckpointVersionError(CheckpointError):
    """A checkpoint file has an unknown format version."""


class DivergenceError(QAuctionError, RuntimeError):
    """Training produced a non-finite loss."""


class InternalInvariantError(QAuctionError, RuntimeError):
    """An internal consistency check failed (bug, not user error)."""
