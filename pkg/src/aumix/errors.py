"""Exception types shared across the package."""


class AumixError(Exception):
    """Base class for all package errors."""


class InvalidInputError(AumixError, ValueError):
    """An argument violates an operation's preconditions."""


class StateError(AumixError, RuntimeError):
    """An operation was called in the wrong order or on incomplete state."""


class ConfigError(InvalidInputError):
    """A run configuration failed validation."""


class CheckpointError(AumixError):
    """A checkpoint is unreadable or does not match the expected config."""


class ManifestError(AumixError):
    """A required category manifest is missing or belongs to another run."""
