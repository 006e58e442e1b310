"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible or unsupported shapes."""


class NumericError(ArithmeticError):
    """A numeric routine received or produced non-finite values."""


class DivergenceError(NumericError):
    """A sampler produced a non-finite state."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"sampler diverged at step {step}")


class SpecError(ValueError):
    """Invalid layer or run specification."""


class InputError(ValueError):
    """Invalid call-site input (empty batch, empty sample set, ...)."""


class FormatError(ValueError):
    """Malformed external file; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class CorruptionError(FormatError):
    """Checkpoint checksum or length validation failed."""


class VersionError(FormatError):
    """Checkpoint written by a newer format version."""


class DegenerateBasisError(ValueError):
    """Directions used to span a plane are (numerically) collinear."""
