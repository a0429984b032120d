"""Synthetic tree models and simulated terrestrial-laser scans.

Trees are unions of tapered cylinders (cone frusta): a trunk chain plus
branches. A scan station sweeps a ray per (alpha, beta) cell of the angular
grid covering the tree, keeps the nearest frustum intersection (occlusion),
and offsets the range by clipped Gaussian noise. Every emitted point carries
the index of the primitive it hit, and datasets record the exact rigid
transforms between station frames, so registration results can be checked
against ground truth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidSpec, NoIntersections
from .geometry import PointCloud, RigidTransform, compose, inverse, rotation_about_z
from .projection import ScannerSpec

__all__ = [
    "Frustum",
    "TreeModel",
    "TreeParams",
    "ScanStation",
    "LabeledScan",
    "ScanDataset",
    "generate_tree",
    "simulate_scan",
    "make_dataset",
]

MIN_RAY_RANGE = 0.25  # meters; ignore hits closer than this to the scanner


@dataclass(frozen=True)
class Frustum:
    """Tapered cylinder segment from base_center to top_center."""

    base_center: np.ndarray
    top_center: np.ndarray
    base_radius: float
    top_radius: float

    def __post_init__(self):
        base = np.asarray(self.base_center, dtype=np.float64).reshape(3)
        top = np.asarray(self.top_center, dtype=np.float64).reshape(3)
        object.__setattr__(self, "base_center", base)
        object.__setattr__(self, "top_center", top)
        if self.base_radius <= 0 or self.top_radius <= 0:
            raise InvalidSpec("frustum radii must be positive")
        if self.top_radius > self.base_radius + 1e-12:
            raise InvalidSpec("frustum must not thicken toward its top")
        if np.allclose(base, top):
            raise InvalidSpec("frustum has zero length")

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.top_center - self.base_center))

    @property
    def direction(self) -> np.ndarray:
        d = self.top_center - self.base_center
        return d / np.linalg.norm(d)

    def surface_distance(self, points: np.ndarray) -> np.ndarray:
        """Unsigned distance from each point to the lateral surface.

        Axial coordinates are clamped to the segment, matching how scan
        labels are validated.
        """
        pts = np.atleast_2d(points)
        u = self.direction
        w = pts - self.base_center
        s = np.clip(w @ u, 0.0, self.length)
        radial = np.linalg.norm(w - s[:, None] * u, axis=1)
        r_here = self.base_radius + (self.top_radius - self.base_radius) * s / self.length
        return np.abs(radial - r_here)


@dataclass(frozen=True)
class TreeModel:
    """Trunk frusta plus branch frusta; primitives() flattens them with ids."""

    trunk: tuple[Frustum, ...]
    branches: tuple[Frustum, ...]

    def primitives(self) -> tuple[Frustum, ...]:
        return self.trunk + self.branches

    def primitive_group(self, primitive_id: int) -> str:
        """'trunk' for any trunk segment, 'branch_<k>' for branch k."""
        if primitive_id < len(self.trunk):
            return "trunk"
        return f"branch_{primitive_id - len(self.trunk)}"

    @property
    def height(self) -> float:
        return float(self.trunk[-1].top_center[2])


@dataclass(frozen=True)
class TreeParams:
    """Ranges for the random tree generator. Lengths in meters, angles in degrees."""

    height: float = 10.0
    base_radius: float = 0.16
    top_radius: float = 0.05
    trunk_segments: int = 8
    trunk_bend: float = 0.0  # horizontal offset of the tip for a bent trunk
    n_branches: int = 8
    branch_zone: tuple[float, float] = (0.30, 0.90)  # fractions of height
    branch_inclination: tuple[float, float] = (25.0, 55.0)  # from vertical
    branch_length: tuple[float, float] = (1.2, 2.4)
    branch_radius: tuple[float, float] = (0.035, 0.065)
    branch_taper: float = 0.6  # top radius / base radius
    azimuth_jitter: float = 25.0  # degrees around the golden-angle layout

    def validate(self) -> None:
        if self.height <= 0 or self.base_radius <= 0 or self.top_radius <= 0:
            raise InvalidSpec("tree dimensions must be positive")
        if self.top_radius > self.base_radius:
            raise InvalidSpec("trunk must taper: top_radius <= base_radius")
        if self.trunk_segments < 1:
            raise InvalidSpec("trunk needs at least one segment")
        if self.n_branches < 0:
            raise InvalidSpec("n_branches must be >= 0")
        lo, hi = self.branch_zone
        if not (0.0 < lo <= hi < 1.0):
            raise InvalidSpec("branch_zone fractions must satisfy 0 < lo <= hi < 1")
        if not (0.0 <= self.branch_inclination[0] <= self.branch_inclination[1] < 90.0):
            raise InvalidSpec("branch inclination must lie in [0, 90) degrees")
        if self.branch_length[0] <= 0 or self.branch_length[0] > self.branch_length[1]:
            raise InvalidSpec("invalid branch_length range")
        if self.branch_radius[0] <= 0 or self.branch_radius[0] > self.branch_radius[1]:
            raise InvalidSpec("invalid branch_radius range")
        if not (0.0 < self.branch_taper <= 1.0):
            raise InvalidSpec("branch_taper must be in (0, 1]")


def generate_tree(params: TreeParams = TreeParams(), seed: int = 0) -> TreeModel:
    """Deterministic random tree: tapered trunk chain plus angled branches.

    Branch azimuths follow a golden-angle layout with seeded jitter, which
    keeps the crown asymmetric (no two viewpoints look alike) while spreading
    branches around the stem.
    """
    params.validate()
    rng = np.random.default_rng(seed)

    n_seg = params.trunk_segments
    zs = np.linspace(0.0, params.height, n_seg + 1)
    radii = np.linspace(params.base_radius, params.top_radius, n_seg + 1)
    # Quadratic bend: offset grows with height^2 toward a seeded direction.
    bend_dir = rng.uniform(0.0, 2.0 * math.pi)
    frac = zs / params.height
    off = params.trunk_bend * frac**2
    centers = np.c_[off * math.cos(bend_dir), off * math.sin(bend_dir), zs]
    trunk = tuple(
        Frustum(centers[i], centers[i + 1], float(radii[i]), float(radii[i + 1]))
        for i in range(n_seg)
    )

    branches = []
    golden = math.radians(137.50776)
    z_lo, z_hi = (params.height * f for f in params.branch_zone)
    for k in range(params.n_branches):
        attach_z = rng.uniform(z_lo, z_hi)
        azimuth = k * golden + math.radians(rng.uniform(-params.azimuth_jitter, params.azimuth_jitter))
        incline = math.radians(rng.uniform(*params.branch_inclination))
        length = rng.uniform(*params.branch_length)
        # Thinner than the trunk where it attaches, so the thickness-vs-height
        # verification rule holds on the generated tree.
        trunk_r_here = float(np.interp(attach_z, zs, radii))
        radius = min(rng.uniform(*params.branch_radius), 0.75 * trunk_r_here)
        seg_idx = min(int(attach_z / params.height * n_seg), n_seg - 1)
        axis_frac = (attach_z - zs[seg_idx]) / (zs[seg_idx + 1] - zs[seg_idx])
        base = centers[seg_idx] + axis_frac * (centers[seg_idx + 1] - centers[seg_idx])
        direction = np.array(
            [
                math.sin(incline) * math.cos(azimuth),
                math.sin(incline) * math.sin(azimuth),
                math.cos(incline),
            ]
        )
        branches.append(
            Frustum(base, base + length * direction, radius, params.branch_taper * radius)
        )
    return TreeModel(trunk=trunk, branches=tuple(branches))


@dataclass(frozen=True)
class ScanStation:
    """Scanner pose: world position plus the world->scanner transform."""

    position: np.ndarray
    world_to_scanner: RigidTransform

    def __post_init__(self):
        object.__setattr__(
            self, "position", np.asarray(self.position, dtype=np.float64).reshape(3)
        )


@dataclass(frozen=True)
class LabeledScan:
    """Scanner-frame cloud with a per-point primitive id."""

    cloud: PointCloud
    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        if len(labels) != len(self.cloud):
            raise ValueError("label count must match point count")


def _ray_frustum_range(dirs: np.ndarray, frustum: Frustum, origin: np.ndarray) -> np.ndarray:
    """Range along each unit ray to the frustum's lateral surface (inf = miss).

    Solves the quadratic |w_perp|^2 = (r0 + k * (w . u))^2 along w = p + t*d,
    where u is the axis direction, k the radius slope, and p the origin offset
    from the frustum base. Roots outside the axial extent or behind the
    scanner are discarded; the nearest remaining root wins.
    """
    u = frustum.direction
    length = frustum.length
    r0 = frustum.base_radius
    k = (frustum.top_radius - frustum.base_radius) / length

    p = origin - frustum.base_center
    a_sc = p @ u
    b_sc = dirs @ u
    pd = dirs @ p
    one_k2 = 1.0 + k * k

    qa = 1.0 - one_k2 * b_sc**2
    qb = pd - one_k2 * a_sc * b_sc - r0 * k * b_sc
    qc = p @ p - one_k2 * a_sc**2 - 2.0 * r0 * k * a_sc - r0 * r0

    out = np.full(len(dirs), np.inf)
    disc = qb * qb - qa * qc
    # Quadratic case; near-zero qa (ray parallel to the cone surface) is
    # treated as a miss, which only drops exact grazing rays.
    quad = (np.abs(qa) > 1e-12) & (disc >= 0.0)
    if not quad.any():
        return out
    sq = np.sqrt(disc[quad])
    qa_q, qb_q = qa[quad], qb[quad]
    roots = np.stack([(-qb_q - sq) / qa_q, (-qb_q + sq) / qa_q])
    axial = a_sc + roots * b_sc[quad]
    valid = (roots > MIN_RAY_RANGE) & (axial >= 0.0) & (axial <= length)
    roots = np.where(valid, roots, np.inf)
    out[quad] = roots.min(axis=0)
    return out


def simulate_scan(
    model: TreeModel,
    station: ScanStation,
    spec: ScannerSpec,
    noise_sigma: float = 0.0,
    seed: int = 0,
) -> LabeledScan:
    """Sweep the angular grid over the tree and return the scanner-frame cloud.

    Rays step exactly phi horizontally and vartheta vertically across the
    model's angular bounding box as seen from the station; each ray keeps
    the nearest frustum hit. Range noise is Gaussian, clipped at +-3 sigma,
    so every point stays within 3 sigma of its labeled primitive's surface.
    Output points are ordered by (beta, alpha).
    """
    w2s = station.world_to_scanner
    primitives = model.primitives()
    if not primitives:
        raise InvalidSpec("tree model has no primitives")

    # Angular bounding box from sampled rim points of every frustum.
    rim_angles = []
    phase = np.linspace(0.0, 2.0 * math.pi, 17)[:-1]
    for f in primitives:
        u = f.direction
        ref = np.array([0.0, 0.0, 1.0]) if abs(u[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        e1 = np.cross(u, ref)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(u, e1)
        for center, radius in ((f.base_center, f.base_radius), (f.top_center, f.top_radius)):
            ring = center + radius * (
                np.outer(np.cos(phase), e1) + np.outer(np.sin(phase), e2)
            )
            local = w2s.apply(ring)
            rim_angles.append(
                np.c_[np.arctan2(local[:, 1], local[:, 0]),
                      np.arctan2(local[:, 2], np.hypot(local[:, 0], local[:, 1]))]
            )
    rim = np.vstack(rim_angles)
    margin = 3.0
    a_lo = rim[:, 0].min() - margin * spec.phi
    a_hi = rim[:, 0].max() + margin * spec.phi
    b_lo = rim[:, 1].min() - margin * spec.vartheta
    b_hi = rim[:, 1].max() + margin * spec.vartheta

    # Grid anchored at integer multiples of the step widths.
    ai = np.arange(math.ceil(a_lo / spec.phi), math.floor(a_hi / spec.phi) + 1)
    bi = np.arange(math.ceil(b_lo / spec.vartheta), math.floor(b_hi / spec.vartheta) + 1)
    alphas = ai * spec.phi
    betas = bi * spec.vartheta
    aa = np.tile(alphas, len(betas))           # alpha fastest, beta outer:
    bb = np.repeat(betas, len(alphas))         # output ordered by (beta, alpha)
    cos_b = np.cos(bb)
    dirs_local = np.c_[cos_b * np.cos(aa), cos_b * np.sin(aa), np.sin(bb)]

    s2w = inverse(w2s)
    dirs_world = dirs_local @ s2w.rotation.T
    origin_world = s2w.translation

    best = np.full(len(dirs_world), np.inf)
    label = np.full(len(dirs_world), -1, dtype=np.int64)
    for pid, frustum in enumerate(primitives):
        rng_hit = _ray_frustum_range(dirs_world, frustum, origin_world)
        closer = rng_hit < best
        best[closer] = rng_hit[closer]
        label[closer] = pid

    hit = np.isfinite(best)
    if not hit.any():
        raise NoIntersections("no ray hit the model from this station")
    ranges = best[hit]
    if noise_sigma > 0.0:
        rng = np.random.default_rng(seed)
        noise = rng.normal(0.0, noise_sigma, ranges.shape)
        np.clip(noise, -3.0 * noise_sigma, 3.0 * noise_sigma, out=noise)
        ranges = ranges + noise
    points = dirs_local[hit] * ranges[:, None]
    return LabeledScan(cloud=PointCloud(points), labels=label[hit])


@dataclass(frozen=True)
class ScanDataset:
    """Multi-station scans of one tree with exact inter-station transforms."""

    model: TreeModel
    stations: tuple[ScanStation, ...]
    scans: tuple[LabeledScan, ...]
    spec: ScannerSpec
    noise_sigma: float
    seed: int

    def transform_between(self, i: int, j: int) -> RigidTransform:
        """Ground-truth transform taking scan i's frame into scan j's frame."""
        return compose(self.stations[j].world_to_scanner,
                       inverse(self.stations[i].world_to_scanner))


def make_dataset(
    model: TreeModel,
    n_stations: int = 3,
    radius_m: float = 15.0,
    spec: ScannerSpec | None = None,
    noise_sigma: float = 0.005,
    seed: int = 0,
    station_height: float = 1.5,
) -> ScanDataset:
    """Scan the model from stations equally spaced on a circle around the base.

    Each scanner's x-axis points at the trunk base, so frames of adjacent
    stations differ by large rotations, as in a real multi-station survey.
    """
    if n_stations < 2:
        raise InvalidSpec("need at least two stations")
    if spec is None:
        spec = ScannerSpec.from_degrees(0.06, 0.06)
    seeds = np.random.SeedSequence(seed).generate_state(n_stations)
    stations = []
    scans = []
    for k in range(n_stations):
        gamma = 2.0 * math.pi * k / n_stations
        pos = np.array(
            [radius_m * math.cos(gamma), radius_m * math.sin(gamma), station_height]
        )
        yaw = gamma + math.pi  # x-axis looks back at the trunk
        w2s = RigidTransform(rotation_about_z(yaw).T, -(rotation_about_z(yaw).T @ pos))
        station = ScanStation(position=pos, world_to_scanner=w2s)
        stations.append(station)
        scans.append(simulate_scan(model, station, spec, noise_sigma, seed=int(seeds[k])))
    return ScanDataset(
        model=model,
        stations=tuple(stations),
        scans=tuple(scans),
        spec=spec,
        noise_sigma=noise_sigma,
        seed=seed,
    )
