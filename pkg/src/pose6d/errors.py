"""Exception types shared across the package.

Every error raised on a violated contract derives from :class:`Pose6DError`
so callers can contain failures per work item with a single except clause.
"""


class Pose6DError(Exception):
    """Base class for all package-specific errors."""


class NonPositiveDepth(Pose6DError):
    """A point was projected with camera-frame depth at or below the near limit."""


class DegenerateConfiguration(Pose6DError):
    """Pose solving failed: too few correspondences or no consensus hypothesis."""


class InsufficientCorrespondences(Pose6DError):
    """Not enough voted pixels survived gating to attempt pose solving."""


class EmptyRender(Pose6DError):
    """No triangle of the mesh rasterized inside the viewport."""


class EmptyIntersection(Pose6DError):
    """A crop box does not overlap the source image."""


class ImageTooSmall(Pose6DError):
    """Input image is below the minimum size supported by the feature pyramid."""


class DimMismatch(Pose6DError):
    """Operands have incompatible spatial dimensions."""


class KTooLarge(Pose6DError):
    """More templates requested than the template set contains."""


class InconsistentBands(Pose6DError):
    """Positional-encoding bands disagree beyond the branch-selection margin."""


class EmptyMask(Pose6DError):
    """An operation over masked pixels received an all-false mask."""


class EmptySequence(Pose6DError):
    """A sequence reduction received zero elements."""


class LengthMismatch(Pose6DError):
    """Paired sequences have different lengths."""


class NaNGuard(Pose6DError):
    """A numeric guard tripped on a non-finite intermediate value."""


class EmptyInput(Pose6DError):
    """An aggregate operation received no records."""
