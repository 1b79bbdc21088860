"""Exception types shared across the laboratory."""


class MoeLabError(Exception):
    """Base class for all library errors."""


class ShapeError(MoeLabError):
    """A tensor has the wrong shape, or is empty where data is required."""


class ArgumentError(MoeLabError):
    """An argument value is outside its documented domain."""


class ConfigError(MoeLabError):
    """Inconsistent, missing, or contradictory configuration."""


class ControllerError(MoeLabError):
    """The threshold controller received an unusable measurement."""


class InputError(MoeLabError):
    """Invalid runtime input, e.g. an out-of-vocabulary token id."""


class TrainingAborted(MoeLabError):
    """Training stopped on a non-recoverable numerical failure."""


class GradCheckError(MoeLabError):
    """Finite-difference verification hit a non-finite evaluation."""
