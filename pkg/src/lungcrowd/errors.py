"""Exception hierarchy shared by the pipeline stages.

Each error class maps to a distinct CLI exit code (see cli.EXIT_CODES).
"""


class LungCrowdError(Exception):
    """Base class for all pipeline errors."""


class VolumeFormatError(LungCrowdError):
    """Malformed volume or mask file."""


class SegmentationError(LungCrowdError):
    """Lung extraction / separation failure."""


class RenderError(LungCrowdError):
    """Video segment rendering failure."""


class MarkerPlacementError(LungCrowdError):
    """No valid QC marker placement could be found."""


class ServiceError(LungCrowdError):
    """Task store / HTTP service request rejected."""


class EvaluationError(LungCrowdError):
    """Ground-truth matching or report generation failure."""


class SimulationError(LungCrowdError):
    """Crowd simulation failure."""
