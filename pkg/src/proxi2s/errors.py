"""Exception hierarchy.

Data and configuration problems derive from :class:`DataError`; numerical
failures (rank deficiency, non-convergence, separation, singular Jacobians)
derive from :class:`NumericalError`.  The CLI maps the two families to
distinct exit codes.
"""


class ProxiError(Exception):
    """Base class for all package errors."""

    stage: str | None = None


class DataError(ProxiError, ValueError):
    """Invalid input data or configuration."""


class UnsupportedModelError(DataError):
    """Requested link combination has no two-stage procedure."""


class NumericalError(ProxiError, ArithmeticError):
    """A fit or variance computation failed numerically."""


class RankDeficientError(NumericalError):
    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class ConvergenceError(NumericalError):
    pass


class SeparationError(ConvergenceError):
    pass


class SingularJacobianError(NumericalError):
    def __init__(self, message, condition_number=float("inf")):
        super().__init__(message)
        self.condition_number = condition_number


def annotate(exc, stage):
    """Return a copy of ``exc`` whose message is prefixed with ``stage``."""
    args = (f"{stage}: {exc}",)
    if isinstance(exc, RankDeficientError):
        new = type(exc)(args[0], exc.columns)
    elif isinstance(exc, SingularJacobianError):
        new = type(exc)(args[0], exc.condition_number)
    else:
        new = type(exc)(*args)
    new.stage = stage
    return new


class BootstrapError(NumericalError):
    """Too many bootstrap replicates failed to fit."""
