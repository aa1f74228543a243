"""Exception types raised across the package."""


class ValidationError(ValueError):
    """Input rejected by a precondition or invariant check."""


class NumericalError(RuntimeError):
    """A model evaluation produced a non-physical or non-finite result."""


class NotCalibratedError(ValidationError):
    """An operation needs a twin that has reached a later calibration stage."""
