"""Exception and warning types shared across the package."""


class ShapeError(ValueError):
    """A matrix or tensor has incompatible or degenerate dimensions."""


class NumericalError(RuntimeError):
    """A numerical routine failed to converge or produced non-finite output."""


class ModelFormatError(ValueError):
    """A model manifest or weight blob is malformed."""


class PlanError(ValueError):
    """A compression plan is invalid for the target network."""


class DecompositionError(ValueError):
    """A layer cannot be decomposed with the requested parameters."""


class RankDeficiencyWarning(UserWarning):
    """A least-squares design matrix was numerically rank deficient."""


class CalibrationWarning(UserWarning):
    """A calibration set is smaller than recommended for a stable solve."""
