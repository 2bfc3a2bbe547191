"""Exception hierarchy shared across the package."""


class DlemaError(Exception):
    """Base class for all package errors."""


class LoadError(DlemaError):
    """A referenced file could not be read."""


class ValidationError(DlemaError, ValueError):
    """Input data violates a documented contract."""


class ShapeError(ValidationError):
    """Array dimensions are incompatible."""


class ConfigurationError(ValidationError):
    """A run was configured in a way that cannot proceed."""


class CheckpointError(LoadError):
    """A checkpoint file is malformed or has an unsupported version."""
