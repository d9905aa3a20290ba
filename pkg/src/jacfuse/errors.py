"""Exception hierarchy shared by all jacfuse modules."""


class JacfuseError(Exception):
    """Base class for every error raised deliberately by jacfuse."""


# volume I/O
class NiftiError(JacfuseError, ValueError):
    pass


class BadMagic(NiftiError):
    pass


class UnsupportedDatatype(NiftiError):
    pass


class TruncatedFile(NiftiError):
    pass


class HeaderInconsistent(NiftiError):
    pass


# preprocessing
class DegenerateFit(JacfuseError):
    pass


class EmptyMask(JacfuseError):
    pass


# registration
class SingularTransform(JacfuseError):
    pass


class NoDonorAvailable(JacfuseError):
    pass


# dataset
class InvalidCdr(JacfuseError, ValueError):
    pass


class ZeroVariance(JacfuseError):
    pass


class TooFewSamples(JacfuseError):
    pass


class MissingClass(JacfuseError):
    pass


class ClassTooSmall(JacfuseError):
    pass


# models / fusion
class ShapeMismatch(JacfuseError, ValueError):
    pass


class SingleClass(JacfuseError):
    pass


class DimensionMismatch(JacfuseError, ValueError):
    pass


class EmptyInput(JacfuseError, ValueError):
    pass


class MalformedDistribution(JacfuseError, ValueError):
    pass


class NoModalities(JacfuseError):
    pass


class CheckpointError(JacfuseError):
    pass


# evaluation
class LengthMismatch(JacfuseError, ValueError):
    pass


class AllUndefined(JacfuseError):
    pass


# phantom
class TooFewSubjects(JacfuseError):
    pass
