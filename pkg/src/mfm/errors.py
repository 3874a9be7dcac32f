"""Exception hierarchy.

ValidationError covers bad inputs and configuration (CLI exit code 2);
NumericalError and its subclasses cover runtime numerical failures
(CLI exit code 3).
"""


class MfmError(Exception):
    """Base class for all package errors."""


class ValidationError(MfmError, ValueError):
    """Invalid input, dimension mismatch, or bad configuration."""


class NumericalError(MfmError, RuntimeError):
    """Numerical failure during a computation."""


class DegenerateFactorError(NumericalError):
    """A factor or spectrum is numerically rank deficient."""


class ConvergenceError(NumericalError):
    """An iterative scheme did not converge within its iteration budget."""


class SingularMomentSystemError(NumericalError):
    """A per-coordinate moment system is too close to singular to invert."""


class DivergenceError(NumericalError):
    """Gradient descent diverged; retry with a smaller learning rate."""
