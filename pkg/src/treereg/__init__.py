"""Marker-free coarse-to-fine registration of multi-station tree scans."""

__version__ = "0.1.0"

from .geometry import (
    PointCloud,
    RigidTransform,
    TiePointPair,
    apply_transform,
    compose,
    inverse,
    kabsch_svd,
)
from .projection import ScannerSpec, SphericalImage, project

__all__ = [
    "__version__",
    "PointCloud",
    "RigidTransform",
    "TiePointPair",
    "apply_transform",
    "compose",
    "inverse",
    "kabsch_svd",
    "ScannerSpec",
    "SphericalImage",
    "project",
]
