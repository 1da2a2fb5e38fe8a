"""Depth-supervised neural SDF surface reconstruction from posed imagery."""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    BehindCameraError,
    EmptyIntersectionError,
    FormatError,
    NumericFaultError,
    SdfReconError,
    ValidationError,
)
