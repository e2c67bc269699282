"""Exception types shared across the package."""


class ScrSfmError(Exception):
    """Base class for all package errors."""


class BehindCamera(ScrSfmError):
    pass


class NonPositiveDepth(ScrSfmError):
    pass


class DegenerateRotation(ScrSfmError):
    pass


class DegenerateSample(ScrSfmError):
    pass


class NoRealSolution(ScrSfmError):
    pass


class InsufficientInliers(ScrSfmError):
    pass


class DimensionMismatch(ScrSfmError):
    pass


class FocalCollapse(ScrSfmError):
    pass


class EmptyInput(ScrSfmError):
    pass


class EmptyDepth(ScrSfmError):
    pass


class AllSeedsFailed(ScrSfmError):
    pass


class InvalidConfig(ScrSfmError):
    pass


class NoSurfaceHit(ScrSfmError):
    pass


class DegenerateConfiguration(ScrSfmError):
    pass


class ViewMismatch(ScrSfmError):
    pass


class FormatError(ScrSfmError):
    """Raised when a binary or text file does not match the expected layout."""
