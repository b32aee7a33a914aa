"""Exception hierarchy shared by the estimation pipeline and the CLI."""


class SCIError(Exception):
    """Base class for all package errors."""


class ValidationError(SCIError, ValueError):
    """Input violates a precondition (bad shape, out-of-range argument)."""


class ParseError(ValidationError):
    """A panel file could not be read.

    ``row`` and ``column`` locate the offending cell when known (1-based data
    row, header label).
    """

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class NumericalError(SCIError, ArithmeticError):
    """A numerical routine failed (singular system, rank deficiency)."""


class ConvergenceError(NumericalError):
    """An iterative fit stopped at ``max_iter`` without converging.

    ``last`` holds the final iterate so callers can inspect or reuse it.
    """

    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last
        self.converged = False


class StepError(SCIError):
    """Wraps a failure inside the estimation pipeline with the step name."""

    def __init__(self, step, cause):
        super().__init__(f"{step}: {cause}")
        self.step = step
        self.cause = cause
