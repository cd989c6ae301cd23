"""Exception hierarchy. Every class knows the CLI exit code it maps to."""

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_NUMERIC = 3


class ToolkitError(Exception):
    exit_code = EXIT_USAGE


# --- usage ---

class ArgumentError(ToolkitError, ValueError):
    """Invalid argument or configuration value."""


class ShapeError(ToolkitError, ValueError):
    def __init__(self, message, *shapes):
        self.shapes = tuple(tuple(s) for s in shapes)
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)


# --- checkpoint I/O ---

class CheckpointError(ToolkitError):
    exit_code = EXIT_IO


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedFileError(CheckpointError):
    pass


class DimensionMismatchError(CheckpointError):
    pass


# --- numerics ---

class NumericError(ToolkitError, ArithmeticError):
    exit_code = EXIT_NUMERIC


class ConvergenceError(NumericError):
    def __init__(self, message, residual):
        self.residual = residual
        super().__init__(f"{message} (residual {residual:.3e})")


class NonFiniteLossError(NumericError):
    def __init__(self, step, loss):
        self.step = step
        self.loss = loss
        super().__init__(f"non-finite loss {loss!r} at step {step}")


class DivergenceError(NumericError):
    def __init__(self, step, loss, initial):
        self.step = step
        self.loss = loss
        self.initial = initial
        super().__init__(
            f"optimization diverged at step {step}: loss {loss:.4e} vs initial {initial:.4e}; "
            "try a lower learning rate (--lr)"
        )


class DegenerateInputError(NumericError):
    pass
