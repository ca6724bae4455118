"""Exception types shared across the package."""


class ParameterError(ValueError):
    """An argument violates an operation's contract (shape, range, kind)."""


class UnsupportedError(ParameterError):
    """The requested variant of an operation is deliberately not provided."""


class StateError(RuntimeError):
    """An object was used in a phase where the call is not allowed."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value."""


class FormatError(ValueError):
    """A serialized artifact (image file, checkpoint, config) is malformed.

    Carries the byte or line offset of the first defect when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(ValueError):
    """A run configuration failed schema validation."""
