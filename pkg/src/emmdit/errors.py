"""Exception hierarchy shared across the package."""


class EmmditError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(EmmditError, ValueError):
    """Operand shapes are incompatible with an operation."""


class NumericalError(EmmditError, ArithmeticError):
    """A computation produced NaN or Inf."""


class ConfigError(EmmditError, ValueError):
    """A configuration violates a structural constraint (e.g. divisibility)."""


class CheckpointError(EmmditError, IOError):
    """A checkpoint file is malformed or incompatible."""


class TrainingError(EmmditError, RuntimeError):
    """Training diverged or could not proceed."""


class SamplingError(EmmditError, RuntimeError):
    """The sampler reached a non-finite state."""
