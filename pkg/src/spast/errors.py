"""Exception types shared across the library."""


class SpastError(Exception):
    """Base class for all library-specific errors."""


class ShapeError(SpastError, ValueError):
    """A tensor violates a shape or value-range contract."""


class GridError(SpastError, ValueError):
    """A region grid does not divide a feature map."""


class LevelMismatchError(SpastError, ValueError):
    """Feature pyramids disagree on levels or per-level shapes."""


class ContainerError(SpastError, IOError):
    """A weight/checkpoint container file is malformed."""


class VersionMismatchError(ContainerError):
    """Container was written with an unsupported format version."""


class ChecksumError(ContainerError):
    """Container payload does not match its stored checksum."""


class ConfigError(SpastError, ValueError):
    """Invalid training configuration."""


class StepRangeError(SpastError, ValueError):
    """Diffusion timestep outside the schedule's range."""


class ParameterRangeError(SpastError, ValueError):
    """Noise-schedule parameters outside their valid range."""


class NonFiniteLossError(SpastError, RuntimeError):
    """A loss term became NaN or infinite during training."""


class FrozenPriorError(SpastError, RuntimeError):
    """The style prior would receive gradients while it must stay frozen."""


class UnreadableImageError(SpastError, IOError):
    """An image file could not be decoded."""
