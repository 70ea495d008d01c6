"""Exception types raised across the package."""


class AutoAlignError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(AutoAlignError, ValueError):
    pass


class NumericError(AutoAlignError, ArithmeticError):
    pass


class TapeError(AutoAlignError, RuntimeError):
    pass


class BehindCameraError(AutoAlignError, ValueError):
    pass


class DegenerateBoxError(AutoAlignError, ValueError):
    pass


class UnsupportedRotationError(AutoAlignError, ValueError):
    pass


class PlacementError(AutoAlignError, RuntimeError):
    pass


class SceneParseError(AutoAlignError, ValueError):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class EmptyBatchError(AutoAlignError, ValueError):
    pass


class MissingGradientError(AutoAlignError, RuntimeError):
    pass


class ConfigError(AutoAlignError, ValueError):
    pass


class UnsupportedDiagnosticError(AutoAlignError, ValueError):
    pass
