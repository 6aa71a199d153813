"""Exception hierarchy shared by all nirdml modules."""


class NirError(Exception):
    """Base class; the CLI maps subclasses to an error category."""

    category = "error"


class ZeroVector(NirError, ValueError):
    category = "input"


class DimensionMismatch(NirError, ValueError):
    category = "input"


class ShapeMismatch(DimensionMismatch):
    pass


class EmptyBatch(NirError, ValueError):
    category = "input"


class NoNegativeProxies(NirError, ValueError):
    category = "input"


class MissingProxy(NirError, ValueError):
    category = "input"


class EmptySynthetic(NirError, ValueError):
    category = "input"


class InsufficientClasses(NirError, ValueError):
    category = "data"


class InsufficientSamples(NirError, ValueError):
    category = "data"


class DegenerateSpectrum(NirError, ValueError):
    category = "data"


class InvalidSpec(NirError, ValueError):
    category = "config"


class ConfigError(NirError, ValueError):
    category = "config"


class NonFiniteGradient(NirError, FloatingPointError):
    category = "numerics"


class NonFiniteLoss(NirError, FloatingPointError):
    category = "numerics"

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class CheckpointError(NirError, IOError):
    category = "checkpoint"
