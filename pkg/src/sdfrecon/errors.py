"""Exception hierarchy shared across the package.

Error classes map onto CLI exit codes: validation problems exit 2,
numeric faults during optimization exit 3, file/format problems exit 4.
"""


class SdfReconError(Exception):
    """Base class for all package errors."""


class ValidationError(SdfReconError):
    """Invalid input data, configuration, or argument."""


class FormatError(SdfReconError):
    """Malformed or unreadable on-disk artifact."""

    def __init__(self, message: str, path=None, line: int | None = None):
        loc = ""
        if path is not None:
            loc = f"{path}"
            if line is not None:
                loc += f":{line}"
            loc = f" [{loc}]"
        super().__init__(message + loc)
        self.path = path
        self.line = line


class NumericFaultError(SdfReconError):
    """Non-finite value encountered where finiteness is required."""


class BehindCameraError(ValidationError):
    """Point projected with non-positive view-space depth."""


class EmptyIntersectionError(ValidationError):
    """Ray does not intersect the working domain."""
