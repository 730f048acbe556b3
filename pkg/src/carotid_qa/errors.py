"""Exception hierarchy. Every error raised by the package derives from CarotidQAError."""


class CarotidQAError(Exception):
    pass


class ConfigError(CarotidQAError, ValueError):
    pass


class MissingArtifact(CarotidQAError, FileNotFoundError):
    pass


class NumericFailure(CarotidQAError, ArithmeticError):
    """Base for failures the CLI maps to exit code 4."""


# volume
class DegenerateIntensity(NumericFailure):
    pass


class FormatError(CarotidQAError, ValueError):
    pass


class DimensionMismatch(CarotidQAError, ValueError):
    pass


class OutOfBounds(CarotidQAError, IndexError):
    pass


# phantom
class GeometryOverflow(CarotidQAError, ValueError):
    pass


class CenterOutsideLumen(CarotidQAError, ValueError):
    pass


# polar / predictor
class InvalidContour(CarotidQAError, ValueError):
    pass


class ShapeMismatch(CarotidQAError, ValueError):
    pass


class UntrainedModel(CarotidQAError, RuntimeError):
    pass


class AllRaysFailed(NumericFailure):
    pass


class EmptyDataset(CarotidQAError, ValueError):
    pass


class NonFiniteLoss(NumericFailure):
    pass


class GradientMismatch(NumericFailure):
    def __init__(self, message, offending=()):
        super().__init__(message)
        self.offending = list(offending)


# uncertainty
class MixedGeometry(CarotidQAError, ValueError):
    pass


class CenterOutsideMember(CarotidQAError, ValueError):
    pass


class DegenerateFit(NumericFailure):
    pass


# qa
class SelfIntersecting(CarotidQAError, ValueError):
    pass


class InsufficientGroups(CarotidQAError, ValueError):
    pass
