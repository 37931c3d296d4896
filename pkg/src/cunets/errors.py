"""Exception types shared across the package."""


class CunetsError(Exception):
    """Base class for all package errors."""


class ConfigurationError(CunetsError):
    """A model, layer, or run was configured inconsistently."""


class InputError(CunetsError, ValueError):
    """User-supplied data (arrays, files, flags) violates a precondition."""


class CheckpointError(CunetsError, IOError):
    """A checkpoint file is missing, corrupt, or incompatible."""


class TrainingDiverged(CunetsError, RuntimeError):
    """The optimizer produced a non-finite loss."""
