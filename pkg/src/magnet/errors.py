"""Exception types raised across the package."""


class MagnetError(Exception):
    """Base class for all package errors."""


class DegenerateRotation(MagnetError, ValueError):
    pass


class NotARotation(MagnetError, ValueError):
    pass


class GimbalDegenerate(MagnetError, ValueError):
    pass


class InvalidConfig(MagnetError, ValueError):
    pass


ConfigError = InvalidConfig


class UnsupportedFps(MagnetError, ValueError):
    pass


class ParseError(MagnetError, ValueError):
    def __init__(self, message, line=None, field=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.line = line
        self.field = field


class SchemaVersionMismatch(MagnetError, ValueError):
    pass


class EmptyKeepSet(MagnetError, ValueError):
    pass


class ShapeMismatch(MagnetError, ValueError):
    pass


class MissingDerivedTransforms(MagnetError, ValueError):
    pass


class OddDimension(MagnetError, ValueError):
    pass


class OddHeadDim(MagnetError, ValueError):
    pass


class NonScalarLoss(MagnetError, ValueError):
    pass


class NonFiniteLoss(MagnetError, RuntimeError):
    pass


class OutOfRange(MagnetError, ValueError):
    pass


class InvalidStrategyParams(MagnetError, ValueError):
    pass


class DegenerateLevel(MagnetError, ValueError):
    pass


class PlanModelMismatch(MagnetError, ValueError):
    pass


class MissingConditioning(MagnetError, ValueError):
    pass


class InvalidMode(MagnetError, ValueError):
    pass


class InvalidWindow(MagnetError, ValueError):
    pass


class DimensionMismatch(MagnetError, ValueError):
    pass


class TooFewSamples(MagnetError, ValueError):
    pass


class LengthMismatch(MagnetError, ValueError):
    pass
