"""Coarse registration: rotated-image matching to a first rigid transform.

Both scans are expanded into rotated projection sequences, the best-matching
image combinations are selected, matched pixels are lifted back to 3D by
averaging the source points in each pixel, un-rotated into the scans'
original frames, and fed to the SVD solver. The result maps raw target-scan
coordinates into the reference scan's frame.
"""

from __future__ import annotations

import json
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import EmptyBucket, TooFewSurvivors
from .features import (
    MatchPair,
    MatchVerificationReport,
    SimilarImagePair,
    select_similar_image_pairs,
    verify_matches,
)
from .geometry import (
    PointCloud,
    RigidTransform,
    TiePointPair,
    kabsch_svd,
    rotation_about_z,
    tie_point_rms,
)
from .projection import (
    DEFAULT_BORDER,
    ImageSequence,
    ScannerSpec,
    SphericalImage,
    generate_image_sequence,
    project,
)

__all__ = ["CoarseParams", "CoarseResult", "lift_matches_to_tie_points", "coarse_register"]

MIN_TIE_POINTS = 4
MIN_CLOUD_POINTS = 1000
TIE_POINT_WARN_COUNT = 5
_TRIM_FLOOR = 0.25  # meters; residuals below this are never trimmed


@dataclass(frozen=True)
class CoarseParams:
    """Knobs of the coarse stage; defaults follow the pipeline's usual setup."""

    theta: float = math.radians(10.0)
    n_scans: int = 3
    r1: int = DEFAULT_BORDER
    r2: int = DEFAULT_BORDER
    pair_count: int = 3
    top_k: int = 5
    max_keypoints: int = 500
    verification_enabled: bool = True
    rotate_reference: bool = True  # False: reference contributes only its raw image


@dataclass(frozen=True)
class CoarseResult:
    """Coarse transform (target frame -> reference frame) plus provenance."""

    transform: RigidTransform
    tie_points: tuple[TiePointPair, ...]
    rms_residual: float
    rotation_a: float
    rotation_b: float
    verification: MatchVerificationReport | None
    warnings: tuple[str, ...] = ()
    timings: dict[str, float] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "transform": {
                "rotation": self.transform.rotation.tolist(),
                "translation": self.transform.translation.tolist(),
                "frame": "target→reference",
            },
            "rms_residual": self.rms_residual,
            "rotation_a": self.rotation_a,
            "rotation_b": self.rotation_b,
            "tie_points": [
                {
                    "target": p.target_point.tolist(),
                    "reference": p.reference_point.tolist(),
                    "weight": p.weight,
                }
                for p in self.tie_points
            ],
            "warnings": list(self.warnings),
            "stage_timings": self.timings,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2)


def _unrotate(point: np.ndarray, img: SphericalImage) -> np.ndarray:
    """Map a point from the image's rotated frame back to the scan frame."""
    if img.source_rotation == 0.0:
        return point
    cx, cy = img.rotation_center
    center = np.array([cx, cy, 0.0])
    rot = rotation_about_z(-img.source_rotation)
    return rot @ (point - center) + center


def lift_matches_to_tie_points(
    matches: Sequence[MatchPair],
    img_a: SphericalImage,
    img_b: SphericalImage,
    cloud_a: PointCloud,
    cloud_b: PointCloud,
) -> list[TiePointPair]:
    """Matched pixels to 3D correspondences in the scans' original frames.

    The tie point of a matched pixel is the mean of the source points in its
    bucket. Buckets index the un-rotated clouds (rotation preserves point
    order) and the mean commutes with rigid motion, so averaging raw-frame
    coordinates directly equals rotating the bucket centroid back by the
    image's source rotation.
    """
    pairs = []
    for m in matches:
        bucket_a = img_a.buckets.get((m.keypoint_a.x, m.keypoint_a.y))
        bucket_b = img_b.buckets.get((m.keypoint_b.x, m.keypoint_b.y))
        if bucket_a is None or bucket_b is None:
            raise EmptyBucket(
                f"match at ({m.keypoint_a.x},{m.keypoint_a.y})/"
                f"({m.keypoint_b.x},{m.keypoint_b.y}) hit an empty pixel"
            )
        pairs.append(
            TiePointPair(
                target_point=cloud_a.xyz[bucket_a].mean(axis=0),
                reference_point=cloud_b.xyz[bucket_b].mean(axis=0),
            )
        )
    return pairs


def coarse_register(
    target: PointCloud,
    reference: PointCloud,
    spec: ScannerSpec,
    params: CoarseParams = CoarseParams(),
) -> CoarseResult:
    """Estimate the coarse transform taking target-scan points into the
    reference scan's frame.

    Pipeline: rotated image sequences for both scans, best image-pair
    selection, optional vertical-position match verification, tie-point
    lifting, SVD solve.
    """
    notes = []
    timings: dict[str, float] = {}
    for name, cloud in (("target", target), ("reference", reference)):
        if len(cloud) < MIN_CLOUD_POINTS:
            msg = f"{name} cloud has {len(cloud)} points; matching may be unreliable"
            warnings.warn(msg, stacklevel=2)
            notes.append(msg)

    t0 = time.perf_counter()
    seq_a = generate_image_sequence(target, spec, params.theta, params.n_scans,
                                    params.r1, params.r2)
    if params.rotate_reference:
        seq_b = generate_image_sequence(reference, spec, params.theta, params.n_scans,
                                        params.r1, params.r2)
    else:
        seq_b = ImageSequence(
            entries=(project(reference, spec, params.r1, params.r2),),
            theta=params.theta,
            n_scans=params.n_scans,
            rotation_center=(0.0, 0.0),
        )
    timings["sequences"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    similar = select_similar_image_pairs(
        seq_a, seq_b, params.pair_count, params.top_k, params.max_keypoints
    )
    timings["matching"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    report = None
    kept_by_pair: list[list[MatchPair]] = [list(p.matches) for p in similar]
    if params.verification_enabled:
        report = verify_matches(similar, min_survivors=MIN_TIE_POINTS)
        flat_iter = iter(report.kept)
        kept_by_pair = [
            [m for m in p.matches if next(flat_iter)] for p in similar
        ]
    timings["verification"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    tie_points: list[TiePointPair] = []
    for pair, kept in zip(similar, kept_by_pair):
        tie_points.extend(
            lift_matches_to_tie_points(kept, pair.image_a, pair.image_b, target, reference)
        )
    if len(tie_points) < MIN_TIE_POINTS:
        raise TooFewSurvivors(
            f"{len(tie_points)} tie points after matching; need >= {MIN_TIE_POINTS}",
            stage="coarse.lift",
        )
    transform = kabsch_svd(tie_points)

    # Binary projections carry no range, so a match can pair structures at
    # different depths and pass every image-space check; such pairs only
    # become visible as 3D residual outliers. One trim round removes them.
    residuals = np.linalg.norm(
        transform.apply(np.array([p.target_point for p in tie_points]))
        - np.array([p.reference_point for p in tie_points]),
        axis=1,
    )
    cutoff = max(3.0 * float(np.median(residuals)), _TRIM_FLOOR)
    inliers = [p for p, r in zip(tie_points, residuals) if r <= cutoff]
    if len(inliers) < MIN_TIE_POINTS:
        keep = np.argsort(residuals)[:MIN_TIE_POINTS]
        inliers = [tie_points[i] for i in sorted(keep)]
    if len(inliers) < len(tie_points):
        notes.append(f"trimmed {len(tie_points) - len(inliers)} tie points as 3D outliers")
        tie_points = inliers
        transform = kabsch_svd(tie_points)
    if len(tie_points) < TIE_POINT_WARN_COUNT:
        notes.append(f"only {len(tie_points)} tie points; transform may be unstable")
    timings["solve"] = time.perf_counter() - t0

    best = similar[0]
    return CoarseResult(
        transform=transform,
        tie_points=tuple(tie_points),
        rms_residual=tie_point_rms(tie_points, transform),
        rotation_a=best.image_a.source_rotation,
        rotation_b=best.image_b.source_rotation,
        verification=report,
        warnings=tuple(notes),
        timings=timings,
    )
