"""Exception hierarchy shared by every module."""


class BootregError(Exception):
    """Base class for all package errors."""


class ParameterError(BootregError, ValueError):
    """An argument is outside the accepted domain."""


class InputError(BootregError, ValueError):
    """Input data is missing a required channel or is malformed."""


class DegenerateConfigError(BootregError):
    """A geometric fit is ill-posed (collinear, coincident, too few points)."""


class InsufficientDataError(DegenerateConfigError):
    """Fewer correspondences than the estimator needs."""


class PlyParseError(BootregError):
    """Malformed PLY file. Carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ManifestError(BootregError):
    """Pair manifest failed validation."""


class GenerationError(BootregError):
    """Synthetic pair generation could not satisfy its constraints."""
