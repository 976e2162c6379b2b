"""Exception types shared across the package."""


class DegenCtrlError(Exception):
    """Base class for all package errors."""


class ProfileError(DegenCtrlError):
    """A coefficient profile violates a structural requirement."""


class ConstraintError(DegenCtrlError):
    """A weight/constant constraint (c2, d2, r > 0, ...) is violated."""


class GeometryError(DegenCtrlError):
    """A control-region / interval geometry requirement is violated."""


class ConfigError(DegenCtrlError):
    """Invalid or inconsistent configuration."""


class ConvergenceError(DegenCtrlError):
    """An iterative method failed to converge; carries the last iterate."""

    def __init__(self, message, last_iterate=None, trace=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.trace = trace


class StepFailureError(DegenCtrlError):
    """A banded time-step solve failed; carries the time index."""

    def __init__(self, message, time_index):
        super().__init__(message)
        self.time_index = time_index
