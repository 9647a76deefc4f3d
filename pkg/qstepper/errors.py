"""Exception hierarchy shared by all qstepper modules."""

from typing import Optional, Sequence


class QStepperError(Exception):
    """Base class for all qstepper errors."""

    exit_code = 1


class ConfigError(QStepperError):
    """Invalid configuration or command-line usage."""

    exit_code = 2

    def __init__(self, message: str, field: Optional[str] = None):
        if field:
            message = f"{field}: {message}"
        super().__init__(message)
        self.field = field


class ContractViolation(QStepperError, ValueError):
    """A precondition of an operation does not hold (shapes, ranges, ...)."""

    exit_code = 2


class StepFailure(QStepperError):
    """A Runge-Kutta stage produced a non-finite value."""

    exit_code = 4


class IntegrationFailure(QStepperError):
    """Adaptive integration could not continue (step size underflow, ...)."""

    exit_code = 4


class TrainingDivergence(QStepperError):
    """Training produced a non-finite loss."""

    exit_code = 4

    def __init__(self, message: str, checkpoint: Optional[str] = None):
        if checkpoint:
            message = f"{message} (last good state saved to {checkpoint})"
        super().__init__(message)
        self.checkpoint = checkpoint


class CheckpointError(QStepperError):
    """A checkpoint file is missing, truncated or incompatible."""

    exit_code = 2


class SingularDesignError(QStepperError):
    """The regression design matrix is rank deficient."""

    exit_code = 4

    def __init__(self, message: str, nodes: Sequence[float] = ()):
        if len(nodes):
            message = f"{message}; offending nodes: {', '.join(f'{x:g}' for x in nodes)}"
        super().__init__(message)
        self.nodes = list(nodes)


class NotPositiveDefiniteError(QStepperError):
    """A Gram matrix is not symmetric positive definite."""

    exit_code = 4


class BreakSearchError(QStepperError):
    """Root finding for the break point of a broken polynomial failed."""

    exit_code = 4
