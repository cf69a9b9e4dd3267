"""Exception hierarchy shared by every mmfl module."""


class MMFLError(Exception):
    """Base class for all library errors."""


class ShapeMismatch(MMFLError, ValueError):
    pass


class DomainError(MMFLError, ValueError):
    pass


class NotScalar(MMFLError, ValueError):
    pass


class EmptyGraph(MMFLError, ValueError):
    pass


class BatchTooSmall(MMFLError, ValueError):
    pass


class DimMismatch(ShapeMismatch):
    pass


class EigenFailure(MMFLError, ArithmeticError):
    pass


class InvalidSpec(MMFLError, ValueError):
    pass


class InvalidConfig(MMFLError, ValueError):
    pass


class MissingGradient(MMFLError, KeyError):
    pass


class UnknownModality(MMFLError, KeyError):
    pass


class MissingModality(MMFLError, ValueError):
    pass


class NonBinaryLabel(MMFLError, ValueError):
    pass


class EmptyDataset(MMFLError, ValueError):
    pass


class TooFewGroups(MMFLError, ValueError):
    pass


class CorruptHeader(MMFLError, ValueError):
    pass


class LengthMismatch(MMFLError, ValueError):
    pass


class UnsupportedVersion(MMFLError, ValueError):
    pass


class FormatError(MMFLError, ValueError):
    pass
