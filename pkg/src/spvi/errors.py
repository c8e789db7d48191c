"""Exception types raised across the package."""


class SpviError(Exception):
    """Base class for package errors."""


class DomainError(SpviError, ValueError):
    """An argument lies outside the domain of an operation."""


class ShapeError(SpviError, ValueError):
    """Array shapes are incompatible with an operator or parameter set."""


class SolverError(SpviError, RuntimeError):
    """The adaptive ODE solver exhausted its step budget."""


class TrainingError(SpviError, RuntimeError):
    """Score-model training produced a non-finite loss."""


class ObjectiveError(SpviError, RuntimeError):
    """The variational objective evaluated to a non-finite value."""


class StepError(SpviError, RuntimeError):
    """An optimizer step received a non-finite gradient."""


class CalibrationError(SpviError, RuntimeError):
    """A sampling-mask radius could not be calibrated to the target density."""


class FitError(SpviError, RuntimeError):
    """Mixture fitting failed on every restart."""
