"""Exception taxonomy shared by all chipfield modules."""


class ChipfieldError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(ChipfieldError, ValueError):
    """An input violates a documented invariant (bad density, bad config value...)."""


class DomainError(ChipfieldError, ValueError):
    """A point or argument lies outside the admissible domain."""


class CapacityError(ChipfieldError, ValueError):
    """A problem exceeds the size limits of an oracle-scale solver."""


class ConfigError(ChipfieldError, ValueError):
    """A run configuration is malformed or violates a stability bound."""


class ConvergenceError(ChipfieldError, RuntimeError):
    """An iterative solver failed to reach its tolerance within its budget."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class BlowupError(ChipfieldError, FloatingPointError):
    """A simulation produced non-finite state."""
