"""Exception hierarchy shared by all pipeline stages."""

from __future__ import annotations


class FewViewError(Exception):
    """Base class for every error raised by this package."""


# geometry
class AngleNearPi(FewViewError):
    pass


class BehindCamera(FewViewError):
    pass


class NonPositiveDepth(FewViewError):
    pass


# sdf volume
class OutsideInterior(FewViewError):
    pass


class UnknownPrimitive(FewViewError):
    pass


class NoCrossing(FewViewError):
    pass


# rendering
class CameraInsideSurface(FewViewError):
    pass


class DimensionMismatch(FewViewError):
    pass


# pose initialisation
class DegenerateConfiguration(FewViewError):
    pass


class TooFewCorrespondences(FewViewError):
    pass


class NoConsensus(FewViewError):
    pass


class ViewFailure(FewViewError):
    """Wraps a per-view failure with the index of the offending view."""

    def __init__(self, view_index: int, cause: Exception):
        super().__init__(f"view {view_index}: {type(cause).__name__}: {cause}")
        self.view_index = view_index
        self.cause = cause


# pose refinement
class TooFewPoints(FewViewError):
    pass


class SingularSystem(FewViewError):
    pass


class LengthMismatch(FewViewError):
    pass


# shape update
class NoValidDepth(FewViewError):
    pass


# scenes
class InvalidSpec(FewViewError):
    pass


# evaluation
class NoVisibleSamples(FewViewError):
    pass


class EmptyMesh(FewViewError):
    pass


class ZeroUnion(FewViewError):
    pass


class DegenerateGeometry(FewViewError):
    pass


# cli / io
class MalformedCsv(FewViewError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class IoError(FewViewError, OSError):
    def __init__(self, path, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
