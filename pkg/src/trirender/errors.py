"""Exception types raised across the package."""


class TrirenderError(Exception):
    """Base class for all package errors."""


class ValidationError(TrirenderError, ValueError):
    """Invalid user input (bad config, bad shapes, bad calibration)."""


class ShapeMismatch(ValidationError):
    pass


class AllDepthInvalid(TrirenderError):
    pass


class RayMissesWorkspace(TrirenderError):
    pass


class EmptyWorkspace(TrirenderError):
    pass


class NonScalarLoss(TrirenderError):
    pass


class CycleDetected(TrirenderError):
    pass


class NoValidDepth(TrirenderError):
    pass


class TranslationOutOfBounds(ValidationError):
    pass


class OutOfBounds(ValidationError):
    pass


class InvalidBin(ValidationError):
    pass


class CorruptManifest(TrirenderError):
    pass


class VersionMismatch(TrirenderError):
    pass


class DegenerateCoarse(UserWarning):
    """Coarse pass had no opacity; fine sampling fell back to uniform strata."""
