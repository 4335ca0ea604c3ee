"""Exception hierarchy shared across the package.

Every error raised on a documented failure path derives from
:class:`MorphLabelError` so callers (and the CLI) can map failures to
exit codes without string matching.
"""


class MorphLabelError(Exception):
    """Base class for all morphlabel errors."""


class ConfigError(MorphLabelError):
    """Invalid configuration document or CLI arguments."""


class InvalidConfig(ConfigError):
    """Model configuration violates its invariants."""


class DataError(MorphLabelError):
    """Invalid or missing input data."""


class EmptyMask(DataError):
    """Binary mask contains no foreground pixel."""


class TooFewPoints(DataError):
    """Fewer than five points supplied to the ellipse fit."""


class DegenerateGeometry(DataError):
    """Point set admits no ellipse (e.g. collinear input)."""


class NotAnEllipse(DataError):
    """Conic coefficients do not describe a real ellipse."""


class OutOfFrame(DataError):
    """Ellipse bounding box lies fully outside the image."""


class InvalidSigma(DataError):
    """Non-positive Gaussian width requested."""


class ShapeMismatch(DataError):
    """Operands have incompatible shapes."""


class LengthMismatch(DataError):
    """Lists of outputs / weights / pyramid levels disagree in length."""


class IndivisibleDimensions(DataError):
    """Heatmap dimensions not divisible by the requested pooling factor."""


class InvalidLevelCount(DataError):
    """Supervision weight count must be at least one."""


class InvalidSize(DataError):
    """Unsupported phantom frame size."""


class TooFewVolumes(DataError):
    """Not enough volumes for the requested k-fold split."""


class EmptyGroundTruth(DataError):
    """Sensitivity is undefined for an empty ground-truth mask."""


class EmptyDataset(DataError):
    """Training requires a non-empty train split."""


class MissingFold(DataError):
    """Fold index absent from the dataset manifest."""


class NotScalarRoot(MorphLabelError):
    """backward() requires a scalar root tensor."""


class NumericalFailure(MorphLabelError):
    """Numerical breakdown during training (non-finite loss)."""


class NonFiniteLoss(NumericalFailure):
    """Loss became NaN or infinite; training aborted."""
