"""Exception types raised across the registration pipeline.

Every error carries an optional ``stage`` label so orchestration code can
report which pipeline stage failed without re-wrapping exceptions.
"""

from __future__ import annotations


class TreeRegError(Exception):
    """Base class for all treereg errors."""

    def __init__(self, message: str, *, stage: str | None = None):
        self.stage = stage
        super().__init__(message if stage is None else f"[{stage}] {message}")


# geometry
class TooFewPairs(TreeRegError):
    """Fewer tie-point pairs than the rigid solver needs (minimum 3)."""


class DegenerateGeometry(TreeRegError):
    """Tie-point configuration leaves the rotation underdetermined."""


# spherical projection
class DegeneratePoint(TreeRegError):
    """Point at the origin or on the z-axis: azimuth undefined."""


class EmptyCloud(TreeRegError):
    """Operation requires a non-empty point cloud."""


class AllPointsDegenerate(TreeRegError):
    """Every input point was degenerate; nothing to project."""


class EmptyBucket(TreeRegError):
    """Requested pixel has no source points."""


# image features
class ImageTooSmall(TreeRegError):
    """Image below the minimum size for feature detection."""


class KeypointTooCloseToEdge(TreeRegError):
    """Descriptor patch does not fit inside the image."""


class TooFewKeypoints(TreeRegError):
    """Not enough keypoints to produce the requested number of matches."""


class NoMatchableEntries(TreeRegError):
    """Every image-pair combination failed to produce matches."""


class TooFewMatches(TreeRegError):
    """Match verification needs at least 3 matches."""


class TooFewSurvivors(TreeRegError):
    """Fewer than the required matches survived verification."""


# fine registration
class CloudTooShort(TreeRegError):
    """Cloud z-extent too small to slice layers from."""


class TooFewPoints(TreeRegError):
    """Not enough points for the requested fit."""


class CollinearPoints(TreeRegError):
    """Points are collinear; circle fit undefined."""


class DegenerateConfiguration(TreeRegError):
    """Point configuration admits no unique cylinder (coplanar through axis)."""


class NoCorrespondences(TreeRegError):
    """No fit correspondences within the matching distance."""


class TooFewTiePoints(TreeRegError):
    """Fewer than 3 non-collinear tie-point pairs survive fine registration."""


# evaluation
class FitFailed(TreeRegError):
    """A branch slice could not be fitted."""


class AllBranchesFailed(TreeRegError):
    """No branch pair produced a usable distance."""


class NoConvergence(TreeRegError):
    """Iterative solver hit its iteration cap."""


# simulator
class InvalidSpec(TreeRegError):
    """Tree or scan parameters outside their valid ranges."""


class NoIntersections(TreeRegError):
    """No ray hit any primitive from this station."""


# file I/O
class ParseError(TreeRegError):
    """Malformed input file."""

    def __init__(self, message: str, *, path=None, line: int | None = None, stage=None):
        self.path = path
        self.line = line
        where = f"{path}:{line}: " if line is not None else (f"{path}: " if path else "")
        super().__init__(f"{where}{message}", stage=stage)


class EmptyFile(TreeRegError):
    """Input file contains no points."""
