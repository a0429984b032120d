"""Spherical-projection imaging of a scan.

Each point maps to a pair of angles: alpha, the azimuth of its horizontal
footprint from the x-axis, and beta, its elevation above the xy-plane. The
angular span of the cloud is binned into pixels covering 2*phi by 2*vartheta
(twice the scanner's angular step widths, to absorb sampling discontinuity),
padded with an empty border of r1 columns and r2 rows on each side. Pixels
holding at least one point are 0 (black), empty pixels are 255; every pixel
remembers which source points fell into it so matched pixels can be lifted
back to 3D.

Rotated image sequences re-project the cloud after rotating it about the
vertical axis through its horizontal centroid, which is equivalent to
orbiting the viewpoint, and are the coarse stage's search space.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import AllPointsDegenerate, DegeneratePoint, EmptyBucket, EmptyCloud
from .geometry import (
    PointCloud,
    horizontal_centroid,
    rotate_about_vertical_axis,
)

__all__ = [
    "ScannerSpec",
    "SphericalImage",
    "ImageSequence",
    "spherical_angles",
    "project",
    "pixel_region_centroid",
    "generate_image_sequence",
    "write_pgm",
]

DEFAULT_BORDER = 8  # pixels; leaves feature detectors room near edges


@dataclass(frozen=True)
class ScannerSpec:
    """Angular step widths of the instrument, in radians.

    phi is the horizontal step, vartheta the vertical step. Pixels of the
    projection cover 2*phi x 2*vartheta.
    """

    phi: float
    vartheta: float

    def __post_init__(self):
        for name, value in (("phi", self.phi), ("vartheta", self.vartheta)):
            if not (0.0 < value < math.pi / 2):
                raise ValueError(f"{name} must be in (0, pi/2), got {value}")

    @classmethod
    def from_degrees(cls, phi_deg: float, vartheta_deg: float) -> "ScannerSpec":
        return cls(math.radians(phi_deg), math.radians(vartheta_deg))


def spherical_angles(point) -> tuple[float, float]:
    """(alpha, beta) of a single point; raises DegeneratePoint on the z-axis.

    alpha = atan2(y, x) in (-pi, pi]; beta = atan2(z, sqrt(x^2 + y^2)).
    """
    x, y, z = np.asarray(point, dtype=np.float64).reshape(3)
    horiz = math.hypot(x, y)
    if horiz == 0.0:
        raise DegeneratePoint("azimuth undefined for origin / z-axis points")
    return math.atan2(y, x), math.atan2(z, horiz)


def _wrap_angle(a: np.ndarray) -> np.ndarray:
    """Wrap to (-pi, pi]."""
    wrapped = np.mod(a + np.pi, 2.0 * np.pi) - np.pi
    return np.where(wrapped == -np.pi, np.pi, wrapped)


@dataclass(frozen=True)
class SphericalImage:
    """Binary spherical-projection raster with per-pixel point buckets.

    raster[y, x] is 0 where at least one point projected into column x,
    row y (row index grows with beta), else 255. buckets maps (x, y) to the
    indices of the source points in that pixel. alpha values are binned
    after subtracting alpha_shift (non-zero only when the cloud straddles
    the atan2 branch cut and was re-centered by its circular mean).
    """

    width: int
    height: int
    alpha_min: float
    alpha_max: float
    beta_min: float
    beta_max: float
    r1: int
    r2: int
    spec: ScannerSpec
    raster: np.ndarray
    buckets: dict[tuple[int, int], np.ndarray]
    alpha_shift: float = 0.0
    source_rotation: float = 0.0
    rotation_center: tuple[float, float] = (0.0, 0.0)
    dropped_degenerate: int = 0

    def __post_init__(self):
        self.raster.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int]:
        """(width, height)."""
        return self.width, self.height

    def occupancy(self) -> np.ndarray:
        """uint8 view with 1 at occupied pixels, 0 elsewhere."""
        return (self.raster == 0).astype(np.uint8)

    def pixel_of_angles(self, alpha: float, beta: float) -> tuple[int, int]:
        """Pixel coordinates (x, y) a point with these angles bins into."""
        if self.alpha_shift == 0.0:
            a = alpha
        else:
            a = float(_wrap_angle(np.array([alpha - self.alpha_shift]))[0])
        col = math.floor((a - self.alpha_min) / (2.0 * self.spec.phi))
        row = math.floor((beta - self.beta_min) / (2.0 * self.spec.vartheta))
        interior_w = self.width - 2 * self.r1
        interior_h = self.height - 2 * self.r2
        col = min(max(col, 0), interior_w - 1)
        row = min(max(row, 0), interior_h - 1)
        return col + self.r1, row + self.r2

    def pixel_of_point(self, point) -> tuple[int, int]:
        alpha, beta = spherical_angles(point)
        return self.pixel_of_angles(alpha, beta)

    def pixel_angle_window(self, x: int, y: int) -> tuple[float, float, float, float]:
        """(alpha_low, alpha_high, beta_low, beta_high) covered by pixel (x, y).

        Alpha bounds are in the shifted frame used for binning.
        """
        a_low = self.alpha_min + (x - self.r1) * 2.0 * self.spec.phi
        b_low = self.beta_min + (y - self.r2) * 2.0 * self.spec.vartheta
        return (a_low, a_low + 2.0 * self.spec.phi, b_low, b_low + 2.0 * self.spec.vartheta)

    def beta_interval_low(self, y: int) -> float:
        """Lower beta bound of row y; used by match verification."""
        return self.beta_min + (y - self.r2) * 2.0 * self.spec.vartheta


def project(
    cloud: PointCloud,
    spec: ScannerSpec,
    r1: int = DEFAULT_BORDER,
    r2: int = DEFAULT_BORDER,
    source_rotation: float = 0.0,
    rotation_center: tuple[float, float] = (0.0, 0.0),
) -> SphericalImage:
    """Project a cloud into a binary spherical image.

    Degenerate points (origin / z-axis, where alpha is undefined) are
    dropped and counted, not errors: real scans contain no such returns.
    """
    if len(cloud) == 0:
        raise EmptyCloud("cannot project an empty cloud")
    angles = cloud.angles
    valid = np.isfinite(angles[:, 0]) & np.isfinite(angles[:, 1])
    n_dropped = int(np.count_nonzero(~valid))
    if not valid.any():
        raise AllPointsDegenerate("every point is on the z-axis")
    idx = np.nonzero(valid)[0]
    alpha = angles[idx, 0]
    beta = angles[idx, 1]

    # If the alpha values straddle the branch cut at +-pi while the occupied
    # arc is actually narrower, re-center by the circular mean before binning.
    alpha_shift = 0.0
    span = alpha.max() - alpha.min()
    if span > np.pi:
        mean_angle = math.atan2(np.sin(alpha).mean(), np.cos(alpha).mean())
        shifted = _wrap_angle(alpha - mean_angle)
        if shifted.max() - shifted.min() < span - 1e-12:
            alpha = shifted
            alpha_shift = mean_angle

    alpha_min, alpha_max = float(alpha.min()), float(alpha.max())
    beta_min, beta_max = float(beta.min()), float(beta.max())

    # Image size per the ceil formula; a zero span still gets one interior
    # pixel so single-column clouds remain representable.
    width = max(2 * r1 + 1, math.ceil((alpha_max - alpha_min) / (2.0 * spec.phi) + 2 * r1))
    height = max(2 * r2 + 1, math.ceil((beta_max - beta_min) / (2.0 * spec.vartheta) + 2 * r2))
    interior_w = width - 2 * r1
    interior_h = height - 2 * r2

    col = np.floor((alpha - alpha_min) / (2.0 * spec.phi)).astype(np.int64)
    row = np.floor((beta - beta_min) / (2.0 * spec.vartheta)).astype(np.int64)
    # Points at the exact upper bound of a span that is a whole multiple of
    # the pixel width floor to one past the last interior pixel.
    np.clip(col, 0, interior_w - 1, out=col)
    np.clip(row, 0, interior_h - 1, out=row)
    x = col + r1
    y = row + r2

    raster = np.full((height, width), 255, dtype=np.uint8)
    raster[y, x] = 0

    flat = y * width + x
    order = np.argsort(flat, kind="stable")
    flat_sorted = flat[order]
    starts = np.nonzero(np.r_[True, np.diff(flat_sorted) != 0])[0]
    bounds = np.r_[starts, len(flat_sorted)]
    buckets: dict[tuple[int, int], np.ndarray] = {}
    for s, e in zip(bounds[:-1], bounds[1:]):
        pix = int(flat_sorted[s])
        members = idx[order[s:e]]
        members.setflags(write=False)
        buckets[(pix % width, pix // width)] = members

    return SphericalImage(
        width=width,
        height=height,
        alpha_min=alpha_min,
        alpha_max=alpha_max,
        beta_min=beta_min,
        beta_max=beta_max,
        r1=r1,
        r2=r2,
        spec=spec,
        raster=raster,
        buckets=buckets,
        alpha_shift=alpha_shift,
        source_rotation=source_rotation,
        rotation_center=rotation_center,
        dropped_degenerate=n_dropped,
    )


def pixel_region_centroid(
    img: SphericalImage, cloud: PointCloud, pixel: tuple[int, int]
) -> np.ndarray:
    """Mean 3D point over all source points that binned into the pixel."""
    members = img.buckets.get((int(pixel[0]), int(pixel[1])))
    if members is None or len(members) == 0:
        raise EmptyBucket(f"pixel {tuple(pixel)} has no source points")
    return cloud.xyz[members].mean(axis=0)


@dataclass(frozen=True)
class ImageSequence:
    """Projections of one scan rotated through a progression of angles."""

    entries: tuple[SphericalImage, ...]
    theta: float
    n_scans: int
    rotation_center: tuple[float, float]

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def rotations(self) -> tuple[float, ...]:
        return tuple(e.source_rotation for e in self.entries)


def sequence_rotation_angles(theta: float, n_scans: int) -> list[float]:
    """Arithmetic progression from -360/n degrees, step theta, 720/(n*theta) terms."""
    if theta <= 0:
        raise ValueError("theta must be positive")
    if n_scans < 2:
        raise ValueError("n_scans must be >= 2")
    full = 2.0 * math.pi
    count = math.floor(2.0 * full / (n_scans * theta) + 1e-9)
    if count < 1:
        raise ValueError("rotation step too large: empty sequence")
    span = 2.0 * full / n_scans
    if abs(span / theta - round(span / theta)) > 1e-9:
        warnings.warn(
            "rotation step does not evenly divide 720/n degrees; sequence truncated",
            stacklevel=2,
        )
    start = -full / n_scans
    return [start + i * theta for i in range(count)]


def generate_image_sequence(
    cloud: PointCloud,
    spec: ScannerSpec,
    theta: float,
    n_scans: int,
    r1: int = DEFAULT_BORDER,
    r2: int = DEFAULT_BORDER,
) -> ImageSequence:
    """Project the cloud at every rotation of the viewpoint-search progression.

    The rotation axis is vertical through the horizontal centroid of the
    un-rotated cloud, computed once and recorded on every entry.
    """
    center = horizontal_centroid(cloud)
    entries = []
    for angle in sequence_rotation_angles(theta, n_scans):
        rotated = cloud if angle == 0.0 else rotate_about_vertical_axis(cloud, center, angle)
        entries.append(
            project(rotated, spec, r1, r2, source_rotation=angle, rotation_center=center)
        )
    return ImageSequence(
        entries=tuple(entries), theta=theta, n_scans=n_scans, rotation_center=center
    )


def write_pgm(img: SphericalImage, path) -> None:
    """Write the raster as binary PGM (P5, maxval 255), flipped for display.

    Rows are stored bottom-up (beta grows with row index); image viewers
    expect top-down, so the export flips vertically.
    """
    path = Path(path)
    data = np.flipud(img.raster)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.width} {img.height}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def sequence_pgm_name(scan_label: str, rotation: float) -> str:
    """Filename for a sequence entry's debug image: <scan>_<rotation_deg>.pgm."""
    return f"{scan_label}_{math.degrees(rotation):+08.2f}.pgm"
