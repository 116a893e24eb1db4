"""Exception hierarchy shared across the package."""


class CocoError(Exception):
    """Base class for all errors raised by cocoloss."""


class ZeroNormError(CocoError, ValueError):
    """A vector too close to zero was asked for a direction."""


class NonFiniteEvaluation(CocoError, FloatingPointError):
    """A function probe returned NaN or Inf."""


class NonFiniteLoss(CocoError, FloatingPointError):
    def __init__(self, epoch, batch, value):
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.value = value


class DegenerateConfiguration(CocoError, ValueError):
    """Keypoints do not determine a unique transform (collinear, coincident...)."""


class CountMismatch(CocoError, ValueError):
    pass


class DimMismatch(CocoError, ValueError):
    pass


class PlacementFailure(CocoError, RuntimeError):
    pass


class NoPairs(CocoError, ValueError):
    pass


class EmptyFusion(CocoError, ValueError):
    pass


class EmptyRow(CocoError, ValueError):
    pass


class LengthMismatch(CocoError, ValueError):
    pass


class Degenerate(CocoError, ValueError):
    """Logistic fit has no information (positives and negatives coincide)."""


class UniverseMismatch(CocoError, ValueError):
    """Region files disagree on instance identities or region ids."""
