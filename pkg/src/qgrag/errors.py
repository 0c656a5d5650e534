"""Exception hierarchy.

Every error raised by the package derives from :class:`QgragError`; the CLI
prints ``type(err).__name__`` so the class names double as diagnostics.
"""


class QgragError(Exception):
    """Base class for all package errors."""


class ZeroVector(QgragError, ValueError):
    pass


class DimensionMismatch(QgragError, ValueError):
    pass


class ParseError(QgragError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InconsistentDimension(QgragError, ValueError):
    pass


class DuplicateChunkId(QgragError, ValueError):
    pass


class InvalidChunk(QgragError, ValueError):
    pass


class MissingEmbedding(QgragError, ValueError):
    pass


class EmptyEpisode(QgragError, ValueError):
    pass


class UnknownNode(QgragError, KeyError):
    pass


class UnknownChunk(QgragError, KeyError):
    pass


class MissingGraph(QgragError, KeyError):
    pass


class AllGraphsIsolated(QgragError, ValueError):
    pass


class ShapeMismatch(QgragError, ValueError):
    pass


class InvalidSegmentIds(QgragError, ValueError):
    pass


class NotScalarLoss(QgragError, ValueError):
    pass


class DetachedLoss(QgragError, RuntimeError):
    pass


class InvalidConfig(QgragError, ValueError):
    pass


class BadMagic(QgragError, ValueError):
    pass


class VersionUnsupported(QgragError, ValueError):
    pass


class ChecksumMismatch(QgragError, ValueError):
    pass


class DegenerateGraph(QgragError, ValueError):
    pass


class NoNegativesAvailable(QgragError, ValueError):
    pass


class NoTriplets(QgragError, ValueError):
    pass


class EmptyIndex(QgragError, ValueError):
    pass


class ModelNotLoaded(QgragError, RuntimeError):
    pass


class SingleClassData(QgragError, ValueError):
    pass


class NoGroundTruth(QgragError, ValueError):
    pass


class MissingBackbone(QgragError, FileNotFoundError):
    pass
