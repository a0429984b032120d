"""Fine registration from fitted stem and branch centers.

After coarse alignment, both clouds are sliced into thin horizontal layers
at quartiles of the tree's height. Within a layer, points are separated
into arcs by angular connectivity (gaps beyond three scanner steps split
arcs). The lowest layer's single arc is the trunk cross-section and gets a
Taubin circle fit; every other arc gets an orthogonal-distance cylinder
fit. Circle centers and cylinder axis points (plus a point one unit along
the rising axis) become tie points, cross-scan correspondences are formed
by nearest-neighbor pairing of matching fit kinds, and the SVD solver
yields the refinement transform.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import (
    CloudTooShort,
    CollinearPoints,
    DegenerateConfiguration,
    DegenerateGeometry,
    NoCorrespondences,
    TooFewPoints,
    TooFewTiePoints,
)
from .geometry import PointCloud, RigidTransform, TiePointPair, compose, kabsch_svd, tie_point_rms
from .projection import ScannerSpec

__all__ = [
    "SliceParams",
    "Layer",
    "Arc",
    "CircleFit",
    "CylinderFit",
    "ArcFit",
    "FineResult",
    "slice_layers",
    "separate_arcs",
    "fit_circle_taubin",
    "fit_cylinder_lsq",
    "arc_tie_points",
    "verify_arcs",
    "correspond_fits",
    "fine_register",
]

QUARTILE_FRACTIONS = (0.25, 0.50, 0.75)
_HORIZONTAL_EPS = 1e-6  # |z-component| below this counts as a horizontal axis
_FINE_TRIM_FLOOR = 0.10  # meters; post-solve residuals below this never trim


@dataclass(frozen=True)
class SliceParams:
    """Slicing and fitting knobs for the fine stage.

    heights=None slices at quartiles of the reference cloud's z-range; the
    same heights are used for both clouds so tie points sit on identical
    levels.
    """

    heights: tuple[float, ...] | None = None
    thickness: float = 0.10
    min_arc_points: int = 10
    unit_offset: float = 1.0
    max_correspondence_distance: float = 0.5
    radius_tolerance: float = 0.10
    link_distance: float = 0.75
    rounds: int = 1
    # Axis-direction noise of a thin-slice cylinder fit lands fully on the
    # offset tie point; downweighting it keeps the orientation information
    # without letting that noise steer the solve.
    offset_weight: float = 1.0
    # A clean cross-section fits to a few millimeters; an arc that merged
    # two structures fits an order worse. Fits above both bounds are culled.
    fit_rms_floor: float = 0.008
    fit_rms_ratio: float = 0.12

    def __post_init__(self):
        if self.thickness <= 0:
            raise ValueError("slice thickness must be positive")
        if self.heights is not None:
            hs = tuple(float(h) for h in self.heights)
            if any(b <= a for a, b in zip(hs, hs[1:])):
                raise ValueError("slice heights must be strictly increasing")
            object.__setattr__(self, "heights", hs)
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")


@dataclass(frozen=True)
class Layer:
    """Points of one horizontal slice, by index into the source cloud."""

    height_center: float
    thickness: float
    indices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return len(self.indices)


@dataclass(frozen=True)
class Arc:
    """One angular-connected run of layer points (a cross-section arc)."""

    indices: np.ndarray
    layer_index: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return len(self.indices)


@dataclass(frozen=True)
class CircleFit:
    center_x: float
    center_y: float
    radius: float
    rms: float


@dataclass(frozen=True)
class CylinderFit:
    axis_point: np.ndarray
    direction: np.ndarray
    radius: float
    rms: float
    converged: bool = True

    def __post_init__(self):
        ap = np.asarray(self.axis_point, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        object.__setattr__(self, "axis_point", ap)
        object.__setattr__(self, "direction", d)

    def point_at_z(self, z: float) -> np.ndarray:
        """Axis point at the given height; axis must not be horizontal."""
        c = self.direction[2]
        if abs(c) < _HORIZONTAL_EPS:
            raise DegenerateConfiguration("horizontal axis has no point at fixed z")
        s = (z - self.axis_point[2]) / c
        return self.axis_point + s * self.direction


def slice_layers(
    cloud: PointCloud,
    params: SliceParams = SliceParams(),
    heights: Sequence[float] | None = None,
) -> list[Layer]:
    """Extract one layer per requested height (quartiles by default).

    Layers may come out empty; that is reported downstream, not fatal here.
    """
    z = cloud.xyz[:, 2]
    z_min, z_max = float(z.min()), float(z.max())
    if z_max - z_min <= 4.0 * params.thickness:
        raise CloudTooShort(
            f"z-extent {z_max - z_min:.3f} m too small to slice at {params.thickness} m"
        )
    if heights is None:
        heights = params.heights
    if heights is None:
        extent = z_max - z_min
        heights = tuple(z_min + f * extent for f in QUARTILE_FRACTIONS)
    half = params.thickness / 2.0
    layers = []
    for i, h in enumerate(heights):
        mask = np.abs(z - h) <= half
        layers.append(Layer(height_center=float(h), thickness=params.thickness,
                            indices=np.nonzero(mask)[0]))
    return layers


def _circular_diff(a: np.ndarray, b: float) -> np.ndarray:
    d = np.abs(a - b)
    return np.minimum(d, 2.0 * np.pi - d)


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, i: int, j: int) -> None:
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            self.parent[rj] = ri


def separate_arcs(
    layer: Layer,
    cloud: PointCloud,
    spec: ScannerSpec,
    min_arc_points: int = 10,
) -> list[Arc]:
    """Split a layer into angular-connected arcs.

    Two points are connected when their angle gaps satisfy both
    d_alpha <= 3*phi and d_beta <= 3*vartheta (alpha measured circularly so
    arcs straddling the +-pi cut stay whole); arcs are the connected
    components of that relation. Components below min_arc_points are
    dropped as speckle. Arc point order is by ascending alpha.
    """
    if len(layer) == 0:
        return []
    angles = cloud.angles[layer.indices]
    valid = np.isfinite(angles[:, 0])
    members = layer.indices[valid]
    if len(members) == 0:
        return []
    alpha = angles[valid, 0]
    beta = angles[valid, 1]

    a_tol = 3.0 * spec.phi
    b_tol = 3.0 * spec.vartheta
    order = np.argsort(alpha, kind="stable")
    a_sorted = alpha[order]
    b_sorted = beta[order]
    n = len(order)
    uf = _UnionFind(n)
    # Sweep in alpha: every pair within a_tol is examined once.
    j_start = 0
    for i in range(n):
        j = i + 1
        while j < n and a_sorted[j] - a_sorted[i] <= a_tol:
            if abs(b_sorted[j] - b_sorted[i]) <= b_tol:
                uf.union(i, j)
            j += 1
    # Pairs straddling the -pi/+pi cut.
    span = a_sorted[-1] - a_sorted[0]
    if span > 2.0 * np.pi - a_tol:
        hi = n - 1
        while hi >= 0 and a_sorted[hi] >= a_sorted[-1] - a_tol:
            lo = 0
            while lo < n and a_sorted[lo] <= a_sorted[0] + a_tol:
                if lo != hi and _circular_diff(np.array([a_sorted[hi]]), a_sorted[lo])[0] <= a_tol:
                    if abs(b_sorted[hi] - b_sorted[lo]) <= b_tol:
                        uf.union(hi, lo)
                lo += 1
            hi -= 1

    roots = np.array([uf.find(i) for i in range(n)])
    arcs = []
    for root in np.unique(roots):
        component = order[roots == root]
        if len(component) < min_arc_points:
            continue
        comp_sorted = component[np.argsort(alpha[component], kind="stable")]
        arcs.append(Arc(indices=members[comp_sorted], layer_index=0))
    # Deterministic arc order: by first (smallest-alpha) member's index.
    arcs.sort(key=lambda a: int(a.indices[0]))
    return arcs


def fit_circle_taubin(points_xy) -> CircleFit:
    """Algebraic (Taubin) circle fit; accurate on partial arcs.

    Solves the generalized eigenproblem via SVD of the normalized moment
    matrix [ (z - mean z) / (2 sqrt(mean z)), x, y ] with z = x^2 + y^2.
    """
    pts = np.asarray(points_xy, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"expected (N, 2) array, got {pts.shape}")
    centered = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[0] < 1e-12 or sv[1] < 1e-9 * sv[0]:
        raise CollinearPoints("circle fit needs points off a single line")
    if len(pts) < 6:
        raise TooFewPoints(f"circle fit needs >= 6 points, got {len(pts)}")

    x = centered[:, 0]
    y = centered[:, 1]
    z = x * x + y * y
    z_mean = z.mean()
    z0 = (z - z_mean) / (2.0 * math.sqrt(z_mean))
    _, _, vt = np.linalg.svd(np.column_stack([z0, x, y]), full_matrices=False)
    a0, a1, a2 = vt[2]
    a0 = a0 / (2.0 * math.sqrt(z_mean))
    a3 = -z_mean * a0
    cx = -a1 / (2.0 * a0)
    cy = -a2 / (2.0 * a0)
    radius = math.sqrt(a1 * a1 + a2 * a2 - 4.0 * a0 * a3) / (2.0 * abs(a0))
    center = pts.mean(axis=0) + np.array([cx, cy])
    rms = float(np.sqrt(np.mean((np.hypot(pts[:, 0] - center[0], pts[:, 1] - center[1]) - radius) ** 2)))
    return CircleFit(center_x=float(center[0]), center_y=float(center[1]),
                     radius=float(radius), rms=rms)


_INIT_DIRECTIONS = np.array(
    [
        (i, j, k)
        for i in (-1, 0, 1)
        for j in (-1, 0, 1)
        for k in (-1, 0, 1)
        if (i, j, k) != (0, 0, 0)
    ],
    dtype=np.float64,
)
_INIT_DIRECTIONS /= np.linalg.norm(_INIT_DIRECTIONS, axis=1, keepdims=True)

_GN_MAX_ITERS = 100
_GN_GRAD_TOL = 1e-10


def _axis_basis(direction: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ref = np.array([0.0, 0.0, 1.0]) if abs(direction[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(direction, ref)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(direction, e1)
    return e1, e2


def _orient_direction(d: np.ndarray) -> np.ndarray:
    """Sign-normalize: z-component positive; horizontal axes get a > 0, then b > 0."""
    if d[2] > _HORIZONTAL_EPS:
        return d
    if d[2] < -_HORIZONTAL_EPS:
        return -d
    if d[0] != 0.0:
        return d if d[0] > 0 else -d
    return d if d[1] >= 0 else -d


def fit_cylinder_lsq(points) -> CylinderFit:
    """Orthogonal-distance least-squares cylinder.

    Minimizes sum((distance to axis - R)^2) by Gauss-Newton over an axis
    point (2 dof, moving perpendicular to the axis), the axis direction
    (2 dof) and the radius, line-searched so the objective never increases.
    The start is the best of 26 quantized directions judged by the Taubin
    residual of the points projected along each, which stays reliable on
    thin slices where covariance eigenvectors do not.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (N, 3) array, got {pts.shape}")
    if len(pts) < 9:
        raise TooFewPoints(f"cylinder fit needs >= 9 points, got {len(pts)}")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[0] < 1e-12 or sv[1] < 1e-9 * sv[0]:
        raise DegenerateConfiguration("points have no planar extent to fit a cylinder")

    best = None
    for direction in _INIT_DIRECTIONS:
        e1, e2 = _axis_basis(direction)
        proj = np.column_stack([centered @ e1, centered @ e2])
        try:
            circle = fit_circle_taubin(proj)
        except (CollinearPoints, TooFewPoints):
            continue
        if best is None or circle.rms < best[0]:
            best = (circle.rms, direction, circle, e1, e2)
    if best is None:
        raise DegenerateConfiguration("no candidate axis admits a circle fit")
    _, direction, circle, e1, e2 = best
    axis_point = centroid + circle.center_x * e1 + circle.center_y * e2
    radius = circle.radius

    def residuals(c, u, r):
        w = pts - c
        axial = w @ u
        perp = w - axial[:, None] * u
        dist = np.linalg.norm(perp, axis=1)
        return dist - r, w, axial, dist, perp

    res, w, axial, dist, perp = residuals(axis_point, direction, radius)
    objective = float(res @ res)
    converged = False
    for _ in range(_GN_MAX_ITERS):
        e1, e2 = _axis_basis(direction)
        safe = np.maximum(dist, 1e-12)
        n_hat = perp / safe[:, None]
        jac = np.column_stack(
            [
                -n_hat @ e1,                      # axis point along e1
                -n_hat @ e2,                      # axis point along e2
                -(axial * (w @ e1)) / safe,       # direction tilt toward e1
                -(axial * (w @ e2)) / safe,       # direction tilt toward e2
                -np.ones(len(pts)),               # radius
            ]
        )
        grad = jac.T @ res
        if np.linalg.norm(grad) < _GN_GRAD_TOL:
            converged = True
            break
        step, *_ = np.linalg.lstsq(jac, -res, rcond=None)
        scale = 1.0
        improved = False
        for _ in range(30):
            c_try = axis_point + scale * (step[0] * e1 + step[1] * e2)
            u_try = direction + scale * (step[2] * e1 + step[3] * e2)
            u_try /= np.linalg.norm(u_try)
            r_try = radius + scale * step[4]
            res_try, w_t, ax_t, d_t, p_t = residuals(c_try, u_try, r_try)
            obj_try = float(res_try @ res_try)
            if obj_try <= objective:
                improved = obj_try < objective - 1e-15 * max(objective, 1.0)
                axis_point, direction, radius = c_try, u_try, r_try
                res, w, axial, dist, perp = res_try, w_t, ax_t, d_t, p_t
                objective = obj_try
                break
            scale *= 0.5
        else:
            converged = True  # no descent direction left at float precision
            break
        if not improved:
            converged = True
            break

    if radius < 0:
        radius = -radius
    # Points coplanar with a plane containing the axis leave the cylinder
    # family underdetermined (two parallel line clusters).
    if sv[2] < 1e-9 * sv[0]:
        plane_normal = np.linalg.svd(centered)[2][2]
        if abs(direction @ plane_normal) < 1e-3:
            raise DegenerateConfiguration("points coplanar through the fitted axis")

    direction = _orient_direction(direction)
    rms = float(np.sqrt(np.mean(res**2)))
    # Canonical axis point: closest to the data centroid along the axis.
    axis_point = axis_point + ((centroid - axis_point) @ direction) * direction
    return CylinderFit(axis_point=axis_point, direction=direction, radius=float(radius),
                       rms=rms, converged=converged)


def arc_tie_points(fit: CircleFit | CylinderFit, layer_height: float,
                   unit_offset: float = 1.0) -> list[np.ndarray]:
    """Tie points contributed by one fit.

    Circle: its center at the layer height. Cylinder: the axis point
    re-parameterized to the layer height plus a point unit_offset along the
    rising direction; a horizontal axis keeps its fitted axis point since no
    point of it lies at a prescribed z.
    """
    if isinstance(fit, CircleFit):
        return [np.array([fit.center_x, fit.center_y, layer_height])]
    direction = _orient_direction(fit.direction)
    if abs(direction[2]) < _HORIZONTAL_EPS:
        base = fit.axis_point
    else:
        base = fit.point_at_z(layer_height)
    return [base, base + unit_offset * direction]


@dataclass(frozen=True)
class ArcFit:
    """A fitted arc: its layer, points, fit primitive, and tie points."""

    layer_index: int
    layer_height: float
    arc: Arc
    fit: CircleFit | CylinderFit
    tie_points: tuple[np.ndarray, ...]

    @property
    def kind(self) -> str:
        return "circle" if isinstance(self.fit, CircleFit) else "cylinder"

    @property
    def radius(self) -> float:
        return self.fit.radius

    @property
    def anchor(self) -> np.ndarray:
        return self.tie_points[0]


def verify_arcs(
    arc_fits: Sequence[ArcFit],
    radius_tolerance: float = 0.10,
    link_distance: float = 0.75,
) -> tuple[list[ArcFit], list[tuple[ArcFit, str]]]:
    """Reject fits that thicken with height along the same stem or branch.

    Fits are processed bottom layer first. A fit links to the nearest
    accepted lower-layer fit within link_distance horizontally; if its
    radius exceeds the linked fit's radius by more than the tolerance it is
    rejected (cross-sections grow no thicker going up). Unlinked fits pass.
    """
    accepted: list[ArcFit] = []
    rejected: list[tuple[ArcFit, str]] = []
    for af in sorted(arc_fits, key=lambda a: (a.layer_index, int(a.arc.indices[0]))):
        lower = [g for g in accepted if g.layer_index < af.layer_index]
        if not lower:
            accepted.append(af)
            continue
        dists = [
            (float(np.hypot(g.anchor[0] - af.anchor[0], g.anchor[1] - af.anchor[1])), g)
            for g in lower
        ]
        dist, parent = min(dists, key=lambda t: t[0])
        if dist <= link_distance and af.radius > parent.radius * (1.0 + radius_tolerance):
            rejected.append(
                (af, f"radius {af.radius:.3f} m exceeds lower fit {parent.radius:.3f} m")
            )
        else:
            accepted.append(af)
    return accepted, rejected


def correspond_fits(
    fits_target: Sequence[ArcFit],
    fits_reference: Sequence[ArcFit],
    max_distance: float = 0.5,
    offset_weight: float = 1.0,
) -> tuple[list[TiePointPair], list[ArcFit], list[ArcFit]]:
    """Greedy one-to-one pairing of fits, nearest anchors first.

    Only fits of the same kind pair (a circle center and a cylinder axis
    are different features). Each matched pair contributes its tie points
    elementwise: anchors at weight 1, the cylinder offset points at
    offset_weight. Returns (tie pairs, unmatched target fits, unmatched
    reference fits).
    """
    candidates = []
    for i, ft in enumerate(fits_target):
        for j, fr in enumerate(fits_reference):
            if ft.kind != fr.kind:
                continue
            d = float(np.linalg.norm(ft.anchor - fr.anchor))
            if d <= max_distance:
                candidates.append((d, i, j))
    candidates.sort()
    used_t: set[int] = set()
    used_r: set[int] = set()
    pairs: list[TiePointPair] = []
    for d, i, j in candidates:
        if i in used_t or j in used_r:
            continue
        used_t.add(i)
        used_r.add(j)
        for k, (tp, rp) in enumerate(zip(fits_target[i].tie_points, fits_reference[j].tie_points)):
            weight = 1.0 if k == 0 else offset_weight
            pairs.append(TiePointPair(target_point=tp, reference_point=rp, weight=weight))
    if not pairs:
        raise NoCorrespondences(
            f"no fit pairs within {max_distance} m; is the coarse alignment sound?"
        )
    unmatched_t = [f for i, f in enumerate(fits_target) if i not in used_t]
    unmatched_r = [f for j, f in enumerate(fits_reference) if j not in used_r]
    return pairs, unmatched_t, unmatched_r


@dataclass(frozen=True)
class FineResult:
    """Fine transform (coarse frame -> reference frame) plus fit inventory."""

    transform: RigidTransform
    tie_points: tuple[TiePointPair, ...]
    rms_residual: float
    inventory: tuple[dict, ...]
    rounds_used: int = 1

    def to_json_dict(self) -> dict:
        return {
            "transform": {
                "rotation": self.transform.rotation.tolist(),
                "translation": self.transform.translation.tolist(),
                "frame": "coarse→reference",
            },
            "rms_residual": self.rms_residual,
            "rounds_used": self.rounds_used,
            "tie_points": [
                {
                    "target": p.target_point.tolist(),
                    "reference": p.reference_point.tolist(),
                    "weight": p.weight,
                }
                for p in self.tie_points
            ],
            "arc_inventory": list(self.inventory),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2)


def _fit_cloud_layers(
    cloud: PointCloud,
    spec: ScannerSpec,
    params: SliceParams,
    heights: Sequence[float],
    side: str,
) -> tuple[list[ArcFit], list[dict]]:
    layers = slice_layers(cloud, params, heights=heights)
    inventory: list[dict] = []
    fits: list[ArcFit] = []
    lowest_nonempty = next((i for i, l in enumerate(layers) if len(l) > 0), None)
    for li, layer in enumerate(layers):
        arcs = separate_arcs(layer, cloud, spec, params.min_arc_points)
        if len(layer) == 0:
            inventory.append({"side": side, "layer": li, "status": "empty layer"})
            continue
        use_circle = li == lowest_nonempty and len(arcs) == 1
        for ai, arc in enumerate(arcs):
            arc = replace(arc, layer_index=li)
            pts = cloud.xyz[arc.indices]
            entry = {
                "side": side,
                "layer": li,
                "arc": ai,
                "points": len(arc),
                "kind": "circle" if use_circle else "cylinder",
            }
            try:
                if use_circle:
                    fit = fit_circle_taubin(pts[:, :2])
                    entry.update(center=[fit.center_x, fit.center_y, layer.height_center])
                else:
                    fit = fit_cylinder_lsq(pts)
                    entry.update(center=fit.axis_point.tolist())
                entry.update(radius=fit.radius, rms=fit.rms)
                rms_gate = max(params.fit_rms_floor, params.fit_rms_ratio * fit.radius)
                if fit.rms > rms_gate:
                    entry.update(
                        status=f"rejected: rms {fit.rms:.4f} m implausible for "
                        f"radius {fit.radius:.3f} m (merged arc?)"
                    )
                else:
                    entry.update(status="fitted")
                    fits.append(
                        ArcFit(
                            layer_index=li,
                            layer_height=layer.height_center,
                            arc=arc,
                            fit=fit,
                            tie_points=tuple(
                                arc_tie_points(fit, layer.height_center, params.unit_offset)
                            ),
                        )
                    )
            except (TooFewPoints, CollinearPoints, DegenerateConfiguration) as exc:
                entry.update(status=f"fit failed: {exc}")
            inventory.append(entry)
    return fits, inventory


def fine_register(
    target_coarse: PointCloud,
    reference: PointCloud,
    spec: ScannerSpec,
    params: SliceParams = SliceParams(),
) -> FineResult:
    """Refine a coarse alignment using fitted stem and branch centers.

    target_coarse must already be in the reference frame (coarse applied).
    Slice heights default to quartiles of the reference cloud's z-range and
    are shared by both clouds. With rounds > 1, correspondence and solve
    repeat on the updated tie points until the transform update falls below
    1e-4 m / 1e-5 rad.
    """
    z = reference.xyz[:, 2]
    heights = params.heights
    if heights is None:
        extent = float(z.max() - z.min())
        heights = tuple(float(z.min()) + f * extent for f in QUARTILE_FRACTIONS)

    fits_t, inv_t = _fit_cloud_layers(target_coarse, spec, params, heights, "target")
    fits_r, inv_r = _fit_cloud_layers(reference, spec, params, heights, "reference")
    acc_t, rej_t = verify_arcs(fits_t, params.radius_tolerance, params.link_distance)
    acc_r, rej_r = verify_arcs(fits_r, params.radius_tolerance, params.link_distance)

    inventory = inv_t + inv_r
    for side, rejected in (("target", rej_t), ("reference", rej_r)):
        for af, reason in rejected:
            inventory.append(
                {
                    "side": side,
                    "layer": af.layer_index,
                    "kind": af.kind,
                    "status": f"rejected: {reason}",
                }
            )

    total = RigidTransform.identity()
    tie_points: list[TiePointPair] = []
    rounds_used = 0
    for _ in range(params.rounds):
        rounds_used += 1
        moved_t = [
            replace(
                af,
                tie_points=tuple(total.apply(tp) for tp in af.tie_points),
            )
            for af in acc_t
        ]
        tie_points, unmatched_t, unmatched_r = correspond_fits(
            moved_t, acc_r, params.max_correspondence_distance, params.offset_weight
        )
        if len(tie_points) < 3:
            raise TooFewTiePoints(
                f"{len(tie_points)} tie pairs; need >= 3 non-collinear", stage="fine"
            )
        try:
            update = kabsch_svd(tie_points)
        except DegenerateGeometry as exc:
            raise TooFewTiePoints(f"tie points degenerate: {exc}", stage="fine") from exc
        # One trim round: with a handful of pairs, a single bad
        # correspondence (mispaired branch, leftover bad fit) dominates the
        # least-squares solve; post-solve residual outliers expose it.
        residuals = np.linalg.norm(
            update.apply(np.array([p.target_point for p in tie_points]))
            - np.array([p.reference_point for p in tie_points]),
            axis=1,
        )
        cutoff = max(3.0 * float(np.median(residuals)), _FINE_TRIM_FLOOR)
        if (residuals > cutoff).any() and (residuals <= cutoff).sum() >= 3:
            tie_points = [p for p, r in zip(tie_points, residuals) if r <= cutoff]
            try:
                update = kabsch_svd(tie_points)
            except DegenerateGeometry as exc:
                raise TooFewTiePoints(
                    f"tie points degenerate after trim: {exc}", stage="fine"
                ) from exc
        total = compose(update, total)
        angle = math.acos(np.clip((np.trace(update.rotation) - 1.0) / 2.0, -1.0, 1.0))
        if np.linalg.norm(update.translation) < 1e-4 and angle < 1e-5:
            break

    for f in unmatched_t:
        inventory.append({"side": "target", "layer": f.layer_index, "kind": f.kind,
                          "status": "unmatched"})
    for f in unmatched_r:
        inventory.append({"side": "reference", "layer": f.layer_index, "kind": f.kind,
                          "status": "unmatched"})

    # Residual of the final transform on the original (round-1) tie points.
    base_pairs, _, _ = correspond_fits(
        acc_t, acc_r, params.max_correspondence_distance, params.offset_weight
    )
    return FineResult(
        transform=total,
        tie_points=tuple(base_pairs),
        rms_residual=tie_point_rms(base_pairs, total),
        inventory=tuple(inventory),
        rounds_used=rounds_used,
    )
