"""Exception hierarchy.

Errors fall into three families that the CLI maps to exit codes:
``DataError`` (bad or unreadable input, exit 2), ``NumericError``
(numeric failure, exit 3) and plain ``CortexFieldError`` for contract
violations raised by the library.
"""


class CortexFieldError(Exception):
    pass


class DataError(CortexFieldError):
    pass


class NumericError(CortexFieldError):
    pass


# volume
class UnsupportedDtype(DataError):
    pass


class CorruptHeader(DataError):
    pass


class IoError(DataError):
    pass


class DegenerateTransform(CortexFieldError):
    pass


class NoOverlap(DataError):
    pass


class NonConvergence(NumericError):
    pass


class NonConvergenceWarning(RuntimeWarning):
    pass


# mesh
class ParseError(DataError):
    pass


class NonTriangleFace(DataError):
    pass


class NotClosed(CortexFieldError):
    pass


class DegenerateAfterFallbacks(NumericError):
    pass


class ZeroArea(CortexFieldError):
    pass


class EmptyMesh(DataError):
    pass


# network
class ShapeMismatch(CortexFieldError):
    pass


class RepresentationMismatch(DataError):
    pass


class VersionMismatch(DataError):
    pass


class CorruptCheckpoint(DataError):
    pass


# reconstruction / metrics / synth
class NoSurface(NumericError):
    pass


class DimsMismatch(CortexFieldError):
    pass


class SelfIntersectingInner(DataError):
    pass


class StageError(CortexFieldError):
    """Wraps an error raised inside a named pipeline stage."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
