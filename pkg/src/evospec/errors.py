"""Exception types shared across the package.

The CLI maps each class onto a process exit code.
"""


class EvoSpecError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(EvoSpecError, ValueError):
    exit_code = 2


class DataError(EvoSpecError, ValueError):
    exit_code = 3


class NumericalError(EvoSpecError, ArithmeticError):
    exit_code = 4


class KernelError(NumericalError):
    """Raised when a moment system has no solution on the requested support."""


class StageError(EvoSpecError):
    """Wraps a failure inside a pipeline stage, keeping the stage label."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 4)
        super().__init__(f"[{stage}] {cause}")
