"""Registration-error evaluation from branch-center distances, plus an ICP
baseline.

The error model slices three thin layers (bottom, middle, top) from each
corresponding branch, fits a cylinder per scan per layer, evaluates both
axes at the layer's height, and averages the point-to-point distances over
all layers of all branches. On simulated data, branch correspondences come
from the per-point primitive labels; on real data the caller supplies them.

The ICP baseline is point-to-point with k-d-tree correspondences and
trimming of pairs beyond five times the median distance per iteration,
meant to run only after coarse alignment.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    AllBranchesFailed,
    CollinearPoints,
    DegenerateConfiguration,
    DegenerateGeometry,
    FitFailed,
    TooFewPoints,
)
from .fine import fit_cylinder_lsq
from .geometry import PointCloud, RigidTransform, compose, kabsch_arrays

__all__ = [
    "BranchPairSpec",
    "ErrorReport",
    "IcpResult",
    "branch_error",
    "evaluate",
    "branch_pairs_from_labels",
    "icp_register",
    "format_error_table",
]

EVAL_SLICE_FRACTIONS = (0.25, 0.50, 0.75)  # bottom, middle, top of the branch
MIN_SLICE_POINTS = 30
_MIN_AXIS_SLOPE = 0.05  # |z| component below which an axis cannot be read at fixed z
_RMS_FLOOR = 0.008  # meters; same plausibility gates as the fine stage
_RMS_RATIO = 0.12


@dataclass(frozen=True)
class BranchPairSpec:
    """One branch seen in two scans: member indices plus slice heights."""

    branch_id: str
    indices_a: np.ndarray
    indices_b: np.ndarray
    slice_heights: tuple[float, float, float]
    slice_thickness: float = 0.20

    def __post_init__(self):
        for name in ("indices_a", "indices_b"):
            idx = np.asarray(getattr(self, name), dtype=np.int64)
            idx.setflags(write=False)
            object.__setattr__(self, name, idx)
        object.__setattr__(
            self, "slice_heights", tuple(float(h) for h in self.slice_heights)
        )

    def to_json_dict(self) -> dict:
        return {
            "branch_id": self.branch_id,
            "indices_a": self.indices_a.tolist(),
            "indices_b": self.indices_b.tolist(),
            "slice_heights": list(self.slice_heights),
            "slice_thickness": self.slice_thickness,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "BranchPairSpec":
        return cls(
            branch_id=str(d["branch_id"]),
            indices_a=np.asarray(d["indices_a"], dtype=np.int64),
            indices_b=np.asarray(d["indices_b"], dtype=np.int64),
            slice_heights=tuple(d["slice_heights"]),
            slice_thickness=float(d.get("slice_thickness", 0.20)),
        )


def branch_error(
    pair: BranchPairSpec, cloud_a: PointCloud, cloud_b: PointCloud
) -> list[float]:
    """Per-layer distances between the two scans' branch axes.

    Both clouds must be in the same frame. For each slice height, each
    scan's branch points within the height window get a cylinder fit; both
    axes are evaluated at that height and the Euclidean distance between
    the axis points is one registration-error sample.
    """
    pts_a = cloud_a.xyz[pair.indices_a]
    pts_b = cloud_b.xyz[pair.indices_b]
    half = pair.slice_thickness / 2.0
    distances = []
    for li, h in enumerate(pair.slice_heights):
        axis_points = []
        for scan, pts in (("a", pts_a), ("b", pts_b)):
            sel = pts[np.abs(pts[:, 2] - h) <= half]
            if len(sel) < MIN_SLICE_POINTS:
                raise FitFailed(
                    f"branch {pair.branch_id} slice {li} scan {scan}: "
                    f"{len(sel)} points < {MIN_SLICE_POINTS}"
                )
            try:
                fit = fit_cylinder_lsq(sel)
            except (TooFewPoints, CollinearPoints, DegenerateConfiguration) as exc:
                raise FitFailed(
                    f"branch {pair.branch_id} slice {li} scan {scan}: {exc}"
                ) from exc
            if abs(fit.direction[2]) < _MIN_AXIS_SLOPE:
                raise FitFailed(
                    f"branch {pair.branch_id} slice {li} scan {scan}: axis nearly "
                    "horizontal; no point at the slice height"
                )
            # An occluded sliver of a branch can converge to an absurd
            # large-radius cylinder whose axis sits far from the points;
            # such fits measure nothing about registration.
            extent = float(np.linalg.norm(sel.max(axis=0) - sel.min(axis=0)))
            if fit.rms > max(_RMS_FLOOR, _RMS_RATIO * fit.radius) or fit.radius > extent:
                raise FitFailed(
                    f"branch {pair.branch_id} slice {li} scan {scan}: implausible fit "
                    f"(radius {fit.radius:.3f} m, rms {fit.rms:.4f} m)"
                )
            axis_point = fit.point_at_z(h)
            if np.linalg.norm(axis_point - sel.mean(axis=0)) > max(3.0 * extent, 0.5):
                raise FitFailed(
                    f"branch {pair.branch_id} slice {li} scan {scan}: axis point "
                    "extrapolates far outside the slice"
                )
            axis_points.append(axis_point)
        distances.append(float(np.linalg.norm(axis_points[0] - axis_points[1])))
    return distances


@dataclass(frozen=True)
class ErrorReport:
    """Eq.-style registration error: flat mean of branch-center distances."""

    distances: tuple[float, ...]
    mean: float
    branches: tuple[dict, ...]
    failed: tuple[dict, ...] = ()

    def to_json_dict(self) -> dict:
        return {
            "mean": self.mean,
            "distances": list(self.distances),
            "branches": list(self.branches),
            "failed": list(self.failed),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2)


def evaluate(
    pairs: Sequence[BranchPairSpec], cloud_a: PointCloud, cloud_b: PointCloud
) -> ErrorReport:
    """Mean branch-center distance over all successfully fitted layer pairs.

    Branches whose fits fail are listed and excluded from the mean.
    """
    distances: list[float] = []
    branches: list[dict] = []
    failed: list[dict] = []
    for pair in pairs:
        try:
            d = branch_error(pair, cloud_a, cloud_b)
        except FitFailed as exc:
            failed.append({"branch_id": pair.branch_id, "reason": str(exc)})
            continue
        branches.append({"branch_id": pair.branch_id, "distances": d})
        distances.extend(d)
    if not distances:
        raise AllBranchesFailed("no branch pair produced a usable distance")
    return ErrorReport(
        distances=tuple(distances),
        mean=float(np.mean(distances)),
        branches=tuple(branches),
        failed=tuple(failed),
    )


def branch_pairs_from_labels(
    labels_a: np.ndarray,
    labels_b: np.ndarray,
    cloud_a: PointCloud,
    group_of_label,
    slice_thickness: float = 0.20,
    min_branch_points: int = 150,
) -> list[BranchPairSpec]:
    """Branch correspondences from per-point primitive labels.

    group_of_label maps a primitive id to a group name ('trunk',
    'branch_3', ...); trunk groups are skipped. Slice heights sit at the
    quarter points of the branch's z-extent in cloud_a's frame, shrunk by
    half a slice so the windows stay inside the branch.
    """
    specs = []
    groups_a: dict[str, np.ndarray] = {}
    groups_b: dict[str, np.ndarray] = {}
    for labels, groups in ((labels_a, groups_a), (labels_b, groups_b)):
        for pid in np.unique(labels):
            name = group_of_label(int(pid))
            if name == "trunk":
                continue
            idx = np.nonzero(labels == pid)[0]
            groups[name] = np.concatenate([groups.get(name, np.empty(0, np.int64)), idx])
    for name in sorted(set(groups_a) & set(groups_b)):
        idx_a = groups_a[name]
        idx_b = groups_b[name]
        if len(idx_a) < min_branch_points or len(idx_b) < min_branch_points:
            continue
        z = cloud_a.xyz[idx_a, 2]
        z_lo = float(z.min()) + slice_thickness / 2.0
        z_hi = float(z.max()) - slice_thickness / 2.0
        if z_hi - z_lo < slice_thickness:
            continue
        heights = tuple(z_lo + f * (z_hi - z_lo) for f in EVAL_SLICE_FRACTIONS)
        specs.append(
            BranchPairSpec(
                branch_id=name,
                indices_a=idx_a,
                indices_b=idx_b,
                slice_heights=heights,
                slice_thickness=slice_thickness,
            )
        )
    return specs


@dataclass(frozen=True)
class IcpResult:
    """Cumulative ICP transform plus convergence bookkeeping."""

    transform: RigidTransform
    iterations: int
    converged: bool
    residual: float
    residual_history: tuple[float, ...] = field(default=(), repr=False)


def icp_register(
    target: PointCloud,
    reference: PointCloud,
    max_iters: int = 50,
    convergence_eps: float = 1e-6,
    trim_factor: float = 5.0,
    max_points: int = 20000,
) -> IcpResult:
    """Point-to-point ICP refining an already coarse-aligned target.

    Each iteration matches every (subsampled) target point to its nearest
    reference point, drops pairs farther than trim_factor times the median
    distance, and solves the rigid update; stops when the mean residual
    changes by less than convergence_eps. Hitting the iteration cap returns
    the last iterate flagged as not converged.
    """
    tree = cKDTree(reference.xyz)
    pts = target.xyz
    if len(pts) > max_points:
        stride = int(np.ceil(len(pts) / max_points))
        pts = pts[::stride]
    current = pts
    total = RigidTransform.identity()
    prev_residual = np.inf
    history = []
    converged = False
    iterations = 0
    for iterations in range(1, max_iters + 1):
        dist, nn = tree.query(current)
        cutoff = trim_factor * float(np.median(dist))
        keep = dist <= cutoff
        update = kabsch_arrays(current[keep], reference.xyz[nn[keep]])
        total = compose(update, total)
        current = update.apply(current)
        residual = float(np.mean(np.linalg.norm(current - reference.xyz[nn], axis=1)))
        history.append(residual)
        if abs(prev_residual - residual) < convergence_eps:
            converged = True
            break
        prev_residual = residual
    return IcpResult(
        transform=total,
        iterations=iterations,
        converged=converged,
        residual=history[-1],
        residual_history=tuple(history),
    )


def format_error_table(rows: Sequence[tuple[str, str, float | None]]) -> str:
    """Aligned text table of (method, scan pair, mean error) rows.

    Methods become columns, scan pairs rows, mirroring the usual
    registration-error summaries.
    """
    methods = []
    pairs = []
    for method, pair, _ in rows:
        if method not in methods:
            methods.append(method)
        if pair not in pairs:
            pairs.append(pair)
    values = {(m, p): v for m, p, v in rows}
    width = max(12, *(len(m) + 2 for m in methods))
    header = "Registration errors (m)".ljust(24) + "".join(m.rjust(width) for m in methods)
    lines = [header]
    for p in pairs:
        cells = []
        for m in methods:
            v = values.get((m, p))
            cells.append(("-" if v is None else f"{v:.3f}").rjust(width))
        lines.append(p.ljust(24) + "".join(cells))
    return "\n".join(lines) + "\n"
