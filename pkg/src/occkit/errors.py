"""Exception types shared across the toolkit."""


class OcckitError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(OcckitError):
    """A value violates a type invariant (bad label, unnormalized distribution, ...)."""


class SpecMismatchError(OcckitError):
    """Two grids that must share a GridSpec do not."""


class ShapeError(OcckitError):
    """Array dimensions violate an operation's contract."""


class FormatError(OcckitError):
    """A file does not conform to the OCCK container or box formats."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset
