"""Core 3D types and rigid-transform algebra.

Points are float64 numpy arrays in meters, with the scanner at the local
origin. ``kabsch_svd`` is the single rigid solver used by both registration
stages: centroid-subtracted cross-covariance, SVD, and a reflection guard
that flips the smallest singular direction when the candidate rotation has
determinant -1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateGeometry, TooFewPairs

__all__ = [
    "PointCloud",
    "RigidTransform",
    "TiePointPair",
    "apply_transform",
    "compose",
    "inverse",
    "kabsch_arrays",
    "kabsch_svd",
    "rotate_about_vertical_axis",
    "horizontal_centroid",
    "cloud_spherical_angles",
    "rotation_about_z",
]

_ORTHONORMALITY_TOL = 1e-9


def _as_xyz(points) -> np.ndarray:
    xyz = np.asarray(points, dtype=np.float64)
    if xyz.ndim == 1 and xyz.size == 3:
        xyz = xyz.reshape(1, 3)
    if xyz.ndim != 2 or xyz.shape[1] != 3:
        raise ValueError(f"expected (N, 3) point array, got shape {xyz.shape}")
    return xyz


def cloud_spherical_angles(xyz: np.ndarray) -> np.ndarray:
    """Per-point (alpha, beta) in radians; NaN rows for origin/z-axis points.

    alpha = atan2(y, x) in (-pi, pi]; beta = atan2(z, hypot(x, y)).
    """
    x, y, z = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    horiz = np.hypot(x, y)
    out = np.empty((len(xyz), 2))
    degenerate = horiz == 0.0
    with np.errstate(invalid="ignore"):
        out[:, 0] = np.arctan2(y, x)
        out[:, 1] = np.arctan2(z, horiz)
    out[degenerate] = np.nan
    return out


class PointCloud:
    """Ordered set of 3D points with a lazily cached (alpha, beta) table.

    The angle cache is an optimization only; it is computed on first access
    and dropped by any transform. Instances are immutable: the coordinate
    array is a read-only view.
    """

    __slots__ = ("xyz", "_angles")

    def __init__(self, points):
        xyz = _as_xyz(points).copy()
        if not np.all(np.isfinite(xyz)):
            raise ValueError("point cloud contains non-finite coordinates")
        xyz.setflags(write=False)
        self.xyz = xyz
        self._angles = None

    def __len__(self) -> int:
        return self.xyz.shape[0]

    def __repr__(self) -> str:
        return f"PointCloud({len(self)} points)"

    @property
    def angles(self) -> np.ndarray:
        """(N, 2) array of (alpha, beta); NaN rows mark degenerate points."""
        if self._angles is None:
            angles = cloud_spherical_angles(self.xyz)
            angles.setflags(write=False)
            self._angles = angles
        return self._angles


@dataclass(frozen=True)
class RigidTransform:
    """Proper rotation plus translation: p' = R @ p + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3).copy()
        tra = np.asarray(self.translation, dtype=np.float64).reshape(3).copy()
        err = np.linalg.norm(rot.T @ rot - np.eye(3))
        if err > _ORTHONORMALITY_TOL:
            raise ValueError(f"rotation not orthonormal (|R'R - I| = {err:.3e})")
        if abs(np.linalg.det(rot) - 1.0) > _ORTHONORMALITY_TOL:
            raise ValueError("rotation determinant is not +1 (improper rotation)")
        rot.setflags(write=False)
        tra.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tra)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, xyz: np.ndarray) -> np.ndarray:
        """Transform an (N, 3) or (3,) coordinate array."""
        pts = np.asarray(xyz, dtype=np.float64)
        return pts @ self.rotation.T + self.translation


@dataclass(frozen=True)
class TiePointPair:
    """A 3D correspondence: the same physical feature seen in two scans."""

    target_point: np.ndarray
    reference_point: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        tp = np.asarray(self.target_point, dtype=np.float64).reshape(3)
        rp = np.asarray(self.reference_point, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(tp)) and np.all(np.isfinite(rp))):
            raise ValueError("tie points must be finite")
        if self.weight < 0:
            raise ValueError("tie-point weight must be nonnegative")
        object.__setattr__(self, "target_point", tp)
        object.__setattr__(self, "reference_point", rp)


def apply_transform(cloud: PointCloud, transform: RigidTransform) -> PointCloud:
    """Return a new cloud with every point mapped through the transform.

    Cached angles are not carried over; they are recomputed lazily on the
    result if needed.
    """
    return PointCloud(transform.apply(cloud.xyz))


def compose(outer: RigidTransform, inner: RigidTransform) -> RigidTransform:
    """Transform equivalent to applying ``inner`` first, then ``outer``."""
    return RigidTransform(
        outer.rotation @ inner.rotation,
        outer.rotation @ inner.translation + outer.translation,
    )


def inverse(transform: RigidTransform) -> RigidTransform:
    rot_t = transform.rotation.T
    return RigidTransform(rot_t, -rot_t @ transform.translation)


def kabsch_arrays(
    tgt: np.ndarray, ref: np.ndarray, weights: np.ndarray | None = None
) -> RigidTransform:
    """Array-core rigid solver: minimizes sum(w_i * ||R @ t_i + T - r_i||^2).

    Raises DegenerateGeometry when the pair geometry leaves a rotation axis
    unobservable (collinear or coincident points).
    """
    if weights is None:
        w = np.full(len(tgt), 1.0 / len(tgt))
    else:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.sum() <= 0:
            raise DegenerateGeometry("all tie-point weights are zero")
        w = weights / weights.sum()

    tgt_centroid = w @ tgt
    ref_centroid = w @ ref
    tgt_c = tgt - tgt_centroid
    ref_c = ref - ref_centroid

    # Collinear target or reference points leave rotation about that line free.
    for label, pts in (("target", tgt_c), ("reference", ref_c)):
        s = np.linalg.svd(pts * np.sqrt(w)[:, None], compute_uv=False)
        if s[0] == 0.0 or s[1] < 1e-8 * s[0]:
            raise DegenerateGeometry(f"{label} tie points are collinear or coincident")

    cross_cov = (tgt_c * w[:, None]).T @ ref_c
    u, _, vt = np.linalg.svd(cross_cov)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    tra = ref_centroid - rot @ tgt_centroid
    return RigidTransform(rot, tra)


def kabsch_svd(pairs: Sequence[TiePointPair]) -> RigidTransform:
    """Weighted least-squares rigid transform mapping target points onto
    reference points.

    Minimizes sum(w_i * ||R @ t_i + T - r_i||^2). Requires at least 3
    non-collinear pairs; raises DegenerateGeometry when the pair geometry
    leaves a rotation axis unobservable (collinear or coincident points).
    """
    if len(pairs) < 3:
        raise TooFewPairs(f"rigid solver needs >= 3 pairs, got {len(pairs)}")
    tgt = np.array([p.target_point for p in pairs])
    ref = np.array([p.reference_point for p in pairs])
    w = np.array([p.weight for p in pairs])
    return kabsch_arrays(tgt, ref, w)


def rotation_about_z(angle: float) -> np.ndarray:
    """3x3 rotation matrix about the +z axis."""
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotate_about_vertical_axis(
    cloud: PointCloud, center_xy: tuple[float, float], angle: float
) -> PointCloud:
    """Rotate the cloud about the vertical axis through (x, y, 0).

    z coordinates and horizontal distances to the axis are preserved.
    """
    cx, cy = center_xy
    center = np.array([cx, cy, 0.0])
    rot = rotation_about_z(angle)
    return PointCloud((cloud.xyz - center) @ rot.T + center)


def horizontal_centroid(cloud: PointCloud) -> tuple[float, float]:
    """Mean x and mean y over all points."""
    if len(cloud) == 0:
        raise ValueError("horizontal_centroid of an empty cloud")
    mean = cloud.xyz[:, :2].mean(axis=0)
    return float(mean[0]), float(mean[1])


def tie_point_rms(pairs: Iterable[TiePointPair], transform: RigidTransform) -> float:
    """RMS of ||R @ t + T - r|| over the pairs."""
    tgt = np.array([p.target_point for p in pairs])
    ref = np.array([p.reference_point for p in pairs])
    if len(tgt) == 0:
        return 0.0
    residuals = transform.apply(tgt) - ref
    return float(np.sqrt(np.mean(np.sum(residuals**2, axis=1))))
