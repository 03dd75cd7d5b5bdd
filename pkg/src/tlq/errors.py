"""Exception types shared across the package."""


class TlqError(Exception):
    """Base class for all package errors."""


class ShapeError(TlqError, ValueError):
    """Tensor shapes do not satisfy an operation's preconditions."""


class NumericError(TlqError, ValueError):
    """Input data violates a numeric contract (NaN/Inf where finite required)."""


class ConfigError(TlqError, ValueError):
    """Invalid configuration value (bits out of range, bad mode name, ...)."""


class CheckpointError(TlqError, ValueError):
    """Malformed serialized artifact. `code` identifies the failure class."""

    def __init__(self, code: str, message: str):
        self.code = code
        super().__init__(message)


class LedgerError(TlqError, RuntimeError):
    """Memory ledger corruption (over-free, zero-byte allocation, ...)."""


class ProtocolError(TlqError, RuntimeError):
    """Distributed calibration protocol violation or transport failure."""
