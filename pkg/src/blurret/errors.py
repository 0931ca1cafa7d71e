"""Exception types raised across the package."""


class BlurRetError(Exception):
    """Base class for every error raised by blurret."""


class OutOfBounds(BlurRetError, ValueError):
    pass


class ShapeMismatch(BlurRetError, ValueError):
    pass


class ShapeError(BlurRetError, ValueError):
    pass


class DomainError(BlurRetError, ValueError):
    pass


class EmptyErodedMask(BlurRetError):
    """Eroded support of the alpha mask is empty; the sample must be rejected."""


class EmptyAlpha(BlurRetError):
    pass


class GenerationFailure(BlurRetError):
    pass


class RecordRejected(BlurRetError):
    pass


class InsufficientObjects(BlurRetError):
    pass


class DegenerateDescriptor(BlurRetError):
    pass


class SamplingExhausted(BlurRetError):
    pass


class EmptyIndex(BlurRetError):
    pass


class TrainingDiverged(BlurRetError):
    pass


class ConfigError(BlurRetError, ValueError):
    pass
