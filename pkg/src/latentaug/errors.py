"""Exception taxonomy shared across the library.

Each class corresponds to one kind of contract failure so tests can assert
on the exact failure mode instead of pattern-matching messages.
"""


class LatentAugError(Exception):
    """Base class for all library errors."""


class ShapeMismatchError(LatentAugError, ValueError):
    """Operands have incompatible shapes; the message names both shapes."""


class ConfigurationError(LatentAugError, ValueError):
    """A parameter value is outside its legal range (rates, sizes, keys...)."""


class ValidationError(LatentAugError, ValueError):
    """Input data violates a documented precondition (e.g. rows not one-hot)."""


class BatchTooSmallError(LatentAugError, ValueError):
    """An operation that mixes batch rows was given fewer rows than it needs."""


class MetricUndefinedError(LatentAugError, ValueError):
    """The requested metric has no value on this input (e.g. no positive pair)."""


class MissingGradientError(LatentAugError, RuntimeError):
    """An optimizer step touched a parameter whose gradient was never populated."""


class NumericalError(LatentAugError, ArithmeticError):
    """A non-finite value (NaN/Inf) appeared where finite numbers are required."""


class ReportIOError(LatentAugError, OSError):
    """Reading or writing an experiment artifact failed; message carries the path."""
