"""Exception types; the CLI maps them to exit codes."""


class RidgevalError(Exception):
    """Base class for pipeline errors."""


class InputError(RidgevalError, ValueError):
    """Bad or malformed input data (exit code 2)."""


class NumericalError(RidgevalError, ArithmeticError):
    """A numerical stage failed (exit code 3)."""

    def __init__(self, message: str, stage: str | None = None):
        self.stage = stage
        super().__init__(f"[{stage}] {message}" if stage else message)
