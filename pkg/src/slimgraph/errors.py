"""Exception taxonomy shared across the package."""


class SlimgraphError(Exception):
    """Base class for all package errors."""


class ShapeError(SlimgraphError):
    """Tensor shapes incompatible with an operator's contract."""


class GraphError(SlimgraphError):
    """Structural problem in a computation graph (cycles, bad edges, arity)."""


class GroupError(SlimgraphError):
    """Channel-group resolution or scoring failure."""


class PlanError(SlimgraphError):
    """Prune plan invalid or stale against the resolved groups."""


class QuantError(SlimgraphError):
    """Quantizer lifecycle violation (double instrumentation, bad phase)."""


class CalibrationError(SlimgraphError):
    """Calibration could not derive a usable amax for a quantizer."""


class ExportError(SlimgraphError):
    """Weight export failed (e.g. magnitude overflows half precision)."""


class ModelFormatError(SlimgraphError):
    """Model container corrupt, truncated, or of an unsupported version."""


class TrainingError(SlimgraphError):
    """Training diverged or was configured inconsistently."""
