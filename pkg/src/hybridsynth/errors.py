"""Exception hierarchy shared across the package.

The CLI maps these onto stable exit codes (see cli.EXIT_CODES).
"""


class HybridSynthError(Exception):
    """Base class for all package errors."""


class ConfigurationError(HybridSynthError):
    """Invalid configuration value, flag combination, or model/config mismatch."""


class DataError(HybridSynthError):
    """Malformed or inconsistent input data (images, label maps, datasets)."""


class NumericalAbortError(HybridSynthError):
    """Training produced a non-finite loss; carries a diagnostic snapshot."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


class CheckpointIntegrityError(HybridSynthError):
    """Checkpoint file is truncated, corrupt, or fails its checksum."""


class InternalError(HybridSynthError):
    """Invariant violation inside the package; indicates a bug, not bad input."""
