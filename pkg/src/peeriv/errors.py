"""Exception hierarchy shared by every module."""

import numpy as np


class PeerIVError(Exception):
    """Base class for all package errors."""


class ParseError(PeerIVError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DomainError(ParseError):
    """A binary column holds something other than 0/1."""


class SchemaError(ParseError):
    """Header or column count does not match the dyad schema."""


class PreconditionError(PeerIVError):
    pass


class ConfigurationError(PeerIVError):
    pass


class ConvergenceError(PeerIVError):
    def __init__(self, message, last_iterate=None, step=None):
        self.last_iterate = last_iterate
        self.step = step
        super().__init__(message)


class SeparationError(ConvergenceError):
    """Logistic coefficients diverge because the labels are separable."""


class SingularSystemError(PeerIVError, np.linalg.LinAlgError):
    def __init__(self, message, step=None):
        self.step = step
        super().__init__(message)


class WeakInstrumentError(PeerIVError):
    """Estimated treatment-probability difference is too close to zero."""


class InferenceError(PeerIVError):
    pass


def relabel(exc, step):
    """Return a copy of ``exc`` whose message is prefixed with a step label."""
    msg = f"{step}: {exc}"
    if isinstance(exc, ConvergenceError):
        new = type(exc)(msg, last_iterate=exc.last_iterate, step=step)
    elif isinstance(exc, SingularSystemError):
        new = type(exc)(msg, step=step)
    else:
        new = type(exc)(msg)
    return new
