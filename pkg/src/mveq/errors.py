"""Exception types shared across the toolkit.

DataError subclasses map to CLI exit code 2; everything else that escapes a
command maps to exit code 1 (usage) or 3 (failed self-check).
"""


class MveqError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(MveqError):
    """Inconsistent shapes, parameters or manifest configuration."""


class DataError(MveqError):
    """Unreadable or malformed input data."""


class FormatError(DataError):
    """Binary file format violation; carries the offending byte offset."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class InvalidDepthError(MveqError):
    """Nonpositive depth where a positive depth is required."""


class CameraPlaneError(MveqError):
    """Projection of a point on (or numerically at) the camera plane."""


class InvalidRotationError(MveqError):
    """Matrix is not orthonormal within tolerance."""


class DegenerateFeatureError(MveqError):
    """Feature vector with (near-)zero norm cannot be normalized."""


class NoCandidatesError(MveqError):
    """Candidate grid is empty after masking."""


class InsufficientCorrespondencesError(MveqError):
    """Fewer 2D-3D correspondences than the minimal PnP sample."""
