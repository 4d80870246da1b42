"""Exception types shared across the package."""


class FeatrepError(Exception):
    """Base class for all errors raised by featrep."""


class ShapeMismatch(FeatrepError, ValueError):
    pass


class NonFiniteError(FeatrepError, FloatingPointError):
    pass


class NonFiniteActivation(NonFiniteError):
    pass


class FormatError(FeatrepError, ValueError):
    """A serialized file does not follow the expected layout."""


class BadParam(FeatrepError, ValueError):
    pass


class EmptyClass(FeatrepError):
    pass


class UnreadableImage(FeatrepError):
    pass


class ShapePlanError(FeatrepError, ValueError):
    pass


class LabelOutOfRange(FeatrepError, ValueError):
    pass


class DivergenceDetected(FeatrepError):
    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class EmptyEnsemble(FeatrepError, ValueError):
    pass


class LayerOutOfRange(FeatrepError, IndexError):
    pass


class FeatureOutOfRange(FeatrepError, IndexError):
    pass


class DegenerateData(FeatrepError, UserWarning):
    """Raised as a warning when every training label is identical."""


class SingleClassData(FeatrepError, ValueError):
    pass


class EmptyClassInSplit(FeatrepError, ValueError):
    pass


class MissingClass(FeatrepError, ValueError):
    pass


class BadSubset(FeatrepError, ValueError):
    pass


class MissingCheckpoint(FeatrepError, FileNotFoundError):
    pass
