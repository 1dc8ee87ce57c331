"""Exception hierarchy shared by every module."""


class SlowgenError(Exception):
    """Base class for package errors."""


class ValidationError(SlowgenError, ValueError):
    """Bad input: shapes, invariants, malformed files."""


class NumericalError(SlowgenError, ArithmeticError):
    """A computation produced non-finite values or failed to converge."""


class TrainingError(NumericalError):
    """Training diverged.

    ``checkpoint`` carries the last snapshot whose objective was finite, if any.
    """

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
