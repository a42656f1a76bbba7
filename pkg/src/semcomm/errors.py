"""Exception hierarchy shared across the package."""


class SemcommError(Exception):
    """Base class for all package errors."""


class ConfigurationError(SemcommError, ValueError):
    """Invalid shapes, widths or configuration values."""

    def __init__(self, message, field=None):
        self.field = field
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)


class TrainingError(SemcommError, RuntimeError):
    """Non-finite gradients or losses during optimisation."""


class IngestionError(SemcommError, IOError):
    """Malformed or inconsistent dataset files."""

    def __init__(self, message, path=None):
        self.path = path
        if path is not None:
            message = f"{path}: {message}"
        super().__init__(message)


class ProtocolError(SemcommError, ValueError):
    """Malformed feedback-link frame."""

    def __init__(self, message, offset=0):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class BarrierViolation(SemcommError, RuntimeError):
    """A transmitter or receiver touched state on the wrong side of the link."""


class CheckpointError(SemcommError, IOError):
    """Unreadable, corrupted or incompatible checkpoint."""
