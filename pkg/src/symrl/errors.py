"""Exception types shared across the package."""


class SymrlError(Exception):
    """Base class for all library errors."""


class ConfigurationError(SymrlError, ValueError):
    """Shapes, dimensions, or configuration values are inconsistent."""


class NumericError(SymrlError, FloatingPointError):
    """A computation produced a non-finite value."""


class InputError(SymrlError, ValueError):
    """An environment received an invalid action."""


class UnsupportedEnvironmentError(SymrlError, TypeError):
    """The environment lacks a capability the caller needs."""


class LoadError(SymrlError, OSError):
    """A persisted artifact is missing or corrupt."""
