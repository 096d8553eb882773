class MonoVLError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(MonoVLError, ValueError):
    pass


class NonFiniteError(MonoVLError, FloatingPointError):
    """A forward op produced NaN or Inf."""


class InputError(MonoVLError, ValueError):
    pass


class ConfigError(MonoVLError, ValueError):
    pass


class ProbeError(MonoVLError, FloatingPointError):
    """Finite-difference probe evaluated to a non-finite value."""


class ChecksumError(MonoVLError):
    def __init__(self, message, blob=None):
        super().__init__(message)
        self.blob = blob


class TrainingDiverged(MonoVLError, FloatingPointError):
    pass
