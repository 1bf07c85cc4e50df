"""Exception types shared across the package.

Each class corresponds to one contract violation; callers are expected to
catch `SegmemError` for blanket handling and the concrete class when they
can act on it.
"""


class SegmemError(Exception):
    """Base class for all errors raised by this package."""


# --- tensor / autodiff ---

class ShapeMismatch(SegmemError):
    pass


class UnknownOp(SegmemError):
    pass


class NonScalarLoss(SegmemError):
    pass


class DetachedNode(SegmemError):
    pass


class NonFiniteEvaluation(SegmemError):
    pass


# --- backbone / weights ---

class FrozenViolation(SegmemError):
    pass


class NotFrozen(SegmemError):
    pass


class RangeViolation(SegmemError):
    pass


class EmptyMemory(SegmemError):
    pass


class ArchMismatch(SegmemError):
    pass


# --- memory bank ---

class InsufficientData(SegmemError):
    pass


class EmptySupport(SegmemError):
    pass


class BadMagic(SegmemError):
    pass


class VersionMismatch(SegmemError):
    pass


class CorruptEntry(SegmemError):
    pass


# --- controller ---

class NoMemoryAvailable(SegmemError):
    pass


class EmptyStream(SegmemError):
    pass


# --- data / metrics ---

class DegenerateShape(SegmemError):
    pass


class NonBinary(SegmemError):
    pass


class EmptyRecords(SegmemError):
    pass


class ConfigInvalid(SegmemError):
    pass


class MissingCheckpoint(SegmemError):
    pass


class ZeroParams(SegmemError):
    pass
