"""Exception hierarchy shared by every motionbias module."""


class MotionBiasError(Exception):
    """Base class for all errors raised by motionbias."""


class ValidationError(MotionBiasError, ValueError):
    """Input violates a documented precondition or invariant."""


class ShapeError(ValidationError):
    """Array shapes are incompatible."""


class FormatError(MotionBiasError, ValueError):
    """A tensor file is malformed."""
