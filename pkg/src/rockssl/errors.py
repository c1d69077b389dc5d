"""Exception types raised across the package."""


class RockSSLError(Exception):
    """Base class for every error this package raises on purpose."""


# volumes
class FileSizeMismatch(RockSSLError, ValueError):
    pass


class NotBinary(RockSSLError, ValueError):
    pass


class ZeroSurface(RockSSLError, ValueError):
    pass


class InvalidPorosity(RockSSLError, ValueError):
    pass


class InvalidSpec(RockSSLError, ValueError):
    pass


# sampling
class EdgeTooLarge(RockSSLError, ValueError):
    pass


class EmptyInput(RockSSLError, ValueError):
    pass


class MissingLabels(RockSSLError, ValueError):
    pass


class InvalidSplit(RockSSLError, ValueError):
    pass


# autodiff
class ShapeMismatch(RockSSLError, ValueError):
    pass


class HeadsDontDivide(RockSSLError, ValueError):
    pass


class NonScalarLoss(RockSSLError, ValueError):
    pass


class NonFiniteValue(RockSSLError, FloatingPointError):
    pass


class InvalidEpsilon(RockSSLError, ValueError):
    pass


class NegativeLearningRate(RockSSLError, ValueError):
    pass


# model / checkpoints
class InvalidConfig(RockSSLError, ValueError):
    pass


class WrongHead(RockSSLError, ValueError):
    pass


class MissingNormStats(RockSSLError, ValueError):
    pass


class ConfigMismatch(RockSSLError, ValueError):
    pass


class CorruptCheckpoint(RockSSLError, ValueError):
    pass


class BadMagic(CorruptCheckpoint):
    pass


class UnsupportedVersion(CorruptCheckpoint):
    pass


# training
class LengthMismatch(RockSSLError, ValueError):
    pass


class EmptyMask(RockSSLError, ValueError):
    pass


class ZeroVariance(RockSSLError, ValueError):
    pass


class TooFewSamples(RockSSLError, ValueError):
    pass


class InvalidK(RockSSLError, ValueError):
    pass


class EmptyBudget(RockSSLError, ValueError):
    pass


class NonFiniteLoss(RockSSLError, FloatingPointError):
    """Training diverged; ``epoch`` is where it happened, ``metrics`` what was logged so far."""

    def __init__(self, epoch, metrics=None):
        super().__init__(f"loss became non-finite during epoch {epoch}")
        self.epoch = epoch
        self.metrics = metrics
