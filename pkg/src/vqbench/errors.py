"""Exception types shared across the package."""


class DegenerateInputError(ValueError):
    """Raised when an input vector carries no direction information (zero norm)."""


class FormatError(ValueError):
    """Raised when a binary file does not match its declared format.

    Carries the byte offset at which parsing failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset
