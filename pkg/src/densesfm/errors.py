"""Exception hierarchy shared by every stage of the pipeline."""


class DenseSfMError(Exception):
    """Base class for all errors raised by :mod:`densesfm`."""


class BehindCamera(DenseSfMError):
    """A point has non-positive depth in the camera it is projected into."""


class OutOfImage(DenseSfMError):
    """A projection falls outside the image rectangle."""


class OutOfBounds(DenseSfMError):
    """A lookup coordinate lies outside a sampled field."""


class DegenerateGeometry(DenseSfMError):
    """Zero baseline or a rank-deficient linear system."""


class CheiralityFailure(DenseSfMError):
    """Too many views see a point behind the camera."""


class PairMismatch(DenseSfMError):
    """Forward and backward match fields do not describe the same pair."""


class SingularSystem(DenseSfMError):
    """A kernel system cannot be solved."""


class NonPositiveConfidence(DenseSfMError):
    """A confidence score that must be strictly positive is not."""


class DegenerateGauge(DenseSfMError):
    """Bundle adjustment gauge cannot be fixed for the given model."""


class EmptyCloud(DenseSfMError):
    """A point cloud passed to a metric is empty."""


class AlignmentFailure(DenseSfMError):
    """Predicted and reference poses cannot be aligned."""


class DegenerateConfiguration(AlignmentFailure):
    """Camera centers are too few, coincident or collinear."""


class ConfigInvalid(DenseSfMError, ValueError):
    """A configuration value violates its documented range."""


class StageError(DenseSfMError):
    """Wraps a failure inside a named pipeline stage."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
