"""Exception types shared across the package."""


class OftError(Exception):
    """Base class for all library errors."""


class DimensionError(OftError):
    """Tensor or map shapes are inconsistent with the operation."""


class ContractError(OftError):
    """An argument violates a documented precondition."""


class GeometryError(OftError):
    """A geometric precondition failed (e.g. voxel touches the camera plane)."""


class ParseError(OftError):
    """A text format could not be parsed; carries a line number when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class GenerationError(OftError):
    """Synthetic scene generation could not satisfy its constraints."""
