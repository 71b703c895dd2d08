"""Exception hierarchy shared across the package."""


class OrdinalError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(OrdinalError, ValueError):
    """Parameters violate a model constraint (e.g. non-increasing cutpoints)."""


class DataError(OrdinalError, ValueError):
    """Input data are malformed or inconsistent with the requested operation."""


class NonPositiveDefiniteError(OrdinalError, ArithmeticError):
    """An information matrix (or negative Hessian) is not positive definite."""

    def __init__(self, message, eigenvalues=None):
        super().__init__(message)
        self.eigenvalues = eigenvalues


class UnsupportedDesignError(OrdinalError):
    """The estimator cannot be applied to the given sampling design."""


class ConvergenceError(OrdinalError, RuntimeError):
    """An iterative procedure failed in a way that cannot be reported as a flag."""


class DegenerateSupportError(OrdinalError, ArithmeticError):
    """A normalizing constant vanished (no probability mass to work with)."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index
