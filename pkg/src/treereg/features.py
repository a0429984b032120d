"""Feature detection and matching on binary spherical-projection images.

The detector is a FAST-9 segment test specialized to two-level rasters:
a pixel is a corner candidate when at least 9 contiguous pixels of its
16-pixel Bresenham circle differ from it. Candidates are ranked by a Harris
corner measure on the 0/1 occupancy, non-maximum suppressed over 3x3, and
oriented by the intensity-centroid angle of a 31-pixel patch. Descriptors
are 256 steered-BRIEF comparisons on a fixed pseudo-random pattern, so they
are reproducible across runs. Matching is brute-force mutual-nearest-
neighbor under Hamming distance with a deterministic tie-break.

There is no image pyramid: all projection images share one angular
resolution, so scale invariance buys nothing on these rasters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import (
    ImageTooSmall,
    KeypointTooCloseToEdge,
    NoMatchableEntries,
    TooFewKeypoints,
    TooFewMatches,
    TooFewSurvivors,
)
from .projection import ImageSequence, SphericalImage

__all__ = [
    "Keypoint",
    "MatchPair",
    "SimilarImagePair",
    "MatchVerificationReport",
    "BRIEF_PATTERN",
    "detect_keypoints",
    "describe",
    "extract_features",
    "hamming_matrix",
    "match_images",
    "select_similar_image_pairs",
    "verify_matches",
    "write_match_debug",
]

MIN_IMAGE_SIZE = 64
EDGE_MARGIN = 16          # keypoints keep this many pixels from every edge
PATCH_RADIUS = 15         # 31-pixel orientation / descriptor patch
DESCRIPTOR_BITS = 256
_PATTERN_SEED = 20160419  # frozen; RandomState streams are version-stable

# 16-pixel Bresenham circle of radius 3, clockwise from 12 o'clock.
_CIRCLE = np.array(
    [(0, 3), (1, 3), (2, 2), (3, 1), (3, 0), (3, -1), (2, -2), (1, -3),
     (0, -3), (-1, -3), (-2, -2), (-3, -1), (-3, 0), (-3, 1), (-2, 2), (-1, 3)],
    dtype=np.int64,
)
_ARC_LENGTH = 9

_POPCOUNT = np.unpackbits(np.arange(256, dtype=np.uint8)[:, None], axis=1).sum(axis=1)


def _make_brief_pattern() -> np.ndarray:
    """(256, 4) int8 table of (ax, ay, bx, by) comparison offsets.

    Gaussian offsets with sigma = patch/5, clipped into the patch; the table
    is generated once from a frozen legacy RandomState stream so descriptors
    are identical across runs and platforms.
    """
    rs = np.random.RandomState(_PATTERN_SEED)
    pattern = rs.normal(0.0, (2 * PATCH_RADIUS + 1) / 5.0, size=(DESCRIPTOR_BITS, 4))
    pattern = np.clip(np.rint(pattern), -PATCH_RADIUS, PATCH_RADIUS)
    return pattern.astype(np.int8)


BRIEF_PATTERN = _make_brief_pattern()
BRIEF_PATTERN.setflags(write=False)


@dataclass(frozen=True)
class Keypoint:
    """Corner location with intensity-centroid orientation and Harris score."""

    x: int
    y: int
    orientation: float
    response: float


@dataclass(frozen=True)
class MatchPair:
    """One descriptor match between two images."""

    keypoint_a: Keypoint
    keypoint_b: Keypoint
    hamming: int
    image_pair_id: str = ""


@dataclass(frozen=True)
class SimilarImagePair:
    """A selected image combination and its best matches."""

    image_a: SphericalImage
    image_b: SphericalImage
    matches: tuple[MatchPair, ...]
    score: float


def _occupancy(img: SphericalImage) -> np.ndarray:
    return (img.raster == 0).astype(np.uint8)


def detect_keypoints(img: SphericalImage, max_count: int = 500) -> list[Keypoint]:
    """FAST-9 corners on the binary raster, ranked by Harris response.

    Returns at most max_count keypoints, all at least EDGE_MARGIN pixels
    from the image edges, non-maximum suppressed over 3x3 neighborhoods,
    sorted by descending response with a fixed (y, x) tie-break.
    """
    if img.width < MIN_IMAGE_SIZE or img.height < MIN_IMAGE_SIZE:
        raise ImageTooSmall(
            f"image {img.width}x{img.height} below minimum {MIN_IMAGE_SIZE}"
        )
    occ = _occupancy(img)
    h, w = occ.shape
    m = EDGE_MARGIN
    center_occupied = occ[m:-m, m:-m] == 1

    # On a two-level raster the segment test reduces to occupancy-arc
    # testing. Convex corners (structure tips): an occupied pixel whose
    # circle holds a >= 9-contiguous arc of empty pixels, but not a full
    # empty ring (a blob smaller than the circle is scanner speckle, not a
    # corner). Concave corners (junction notches): an empty pixel whose
    # circle holds a >= 9-contiguous occupied arc; these are snapped to the
    # nearest occupied pixel below so that every keypoint pixel has source
    # points to lift back to 3D.
    nb_empty = np.empty((16,) + center_occupied.shape, dtype=bool)
    for k, (dx, dy) in enumerate(_CIRCLE):
        nb_empty[k] = occ[m + dy : h - m + dy, m + dx : w - m + dx] == 0

    def _arc9(masks: np.ndarray) -> np.ndarray:
        hit = np.zeros(masks.shape[1:], dtype=bool)
        for start in range(16):
            run = masks[start].copy()
            for j in range(1, _ARC_LENGTH):
                run &= masks[(start + j) % 16]
                if not run.any():
                    break
            hit |= run
        return hit

    convex = center_occupied & _arc9(nb_empty) & ~nb_empty.all(axis=0)
    concave = ~center_occupied & _arc9(~nb_empty) & ~(~nb_empty).all(axis=0)

    corner = convex.copy()
    if concave.any():
        win_dy, win_dx = np.mgrid[-3:4, -3:4]
        win_d2 = (win_dy**2 + win_dx**2).ravel()
        # Deterministic snap order: distance, then row, then column.
        snap_order = np.lexsort((win_dx.ravel(), win_dy.ravel(), win_d2))
        for cy, cx in zip(*np.nonzero(concave)):
            y0, x0 = cy + m, cx + m
            for k in snap_order[1:]:
                y1 = y0 + win_dy.ravel()[k]
                x1 = x0 + win_dx.ravel()[k]
                if occ[y1, x1] == 1 and m <= y1 < h - m and m <= x1 < w - m:
                    corner[y1 - m, x1 - m] = True
                    break
    if not corner.any():
        return []

    # Harris measure on the occupancy for ranking.
    f = occ.astype(np.float32)
    gy, gx = np.gradient(f)
    sxx = ndimage.uniform_filter(gx * gx, size=5)
    syy = ndimage.uniform_filter(gy * gy, size=5)
    sxy = ndimage.uniform_filter(gx * gy, size=5)
    harris = (sxx * syy - sxy * sxy) - 0.04 * (sxx + syy) ** 2
    response = harris[m:-m, m:-m]

    resp_masked = np.where(corner, response, -np.inf)
    local_max = ndimage.maximum_filter(resp_masked, size=3)
    keep = corner & (resp_masked >= local_max)
    ys, xs = np.nonzero(keep)
    if len(xs) == 0:
        return []
    resp = response[ys, xs]
    order = np.lexsort((xs, ys, -resp))[:max_count]

    kps = []
    for i in order:
        x = int(xs[i]) + m
        y = int(ys[i]) + m
        kps.append(Keypoint(x=x, y=y, orientation=_orientation(occ, x, y),
                            response=float(resp[i])))
    return kps


_DISK_DY, _DISK_DX = np.nonzero(
    (np.arange(-PATCH_RADIUS, PATCH_RADIUS + 1)[:, None] ** 2
     + np.arange(-PATCH_RADIUS, PATCH_RADIUS + 1)[None, :] ** 2)
    <= PATCH_RADIUS**2
)
_DISK_DY = _DISK_DY - PATCH_RADIUS
_DISK_DX = _DISK_DX - PATCH_RADIUS


def _orientation(occ: np.ndarray, x: int, y: int) -> float:
    """Intensity-centroid angle of the 31-pixel disk around (x, y)."""
    h, w = occ.shape
    ys = np.clip(y + _DISK_DY, 0, h - 1)
    xs = np.clip(x + _DISK_DX, 0, w - 1)
    values = occ[ys, xs].astype(np.float64)
    m10 = float(_DISK_DX @ values)
    m01 = float(_DISK_DY @ values)
    if m10 == 0.0 and m01 == 0.0:
        return 0.0
    return math.atan2(m01, m10)


def describe(img: SphericalImage, keypoints: Sequence[Keypoint]) -> np.ndarray:
    """(N, 32) uint8 packed steered-BRIEF descriptors.

    Each of the 256 pattern pairs is rotated by the keypoint orientation,
    rounded to pixels and compared on the occupancy raster. Rotated samples
    that fall past the image edge are clamped to it.
    """
    occ = _occupancy(img)
    h, w = occ.shape
    out = np.empty((len(keypoints), DESCRIPTOR_BITS // 8), dtype=np.uint8)
    pat = BRIEF_PATTERN.astype(np.float64)
    for i, kp in enumerate(keypoints):
        if not (EDGE_MARGIN <= kp.x < w - EDGE_MARGIN and EDGE_MARGIN <= kp.y < h - EDGE_MARGIN):
            raise KeypointTooCloseToEdge(f"keypoint ({kp.x}, {kp.y}) too close to edge")
        c, s = math.cos(kp.orientation), math.sin(kp.orientation)
        rx_a = np.rint(c * pat[:, 0] - s * pat[:, 1]).astype(np.int64)
        ry_a = np.rint(s * pat[:, 0] + c * pat[:, 1]).astype(np.int64)
        rx_b = np.rint(c * pat[:, 2] - s * pat[:, 3]).astype(np.int64)
        ry_b = np.rint(s * pat[:, 2] + c * pat[:, 3]).astype(np.int64)
        va = occ[np.clip(kp.y + ry_a, 0, h - 1), np.clip(kp.x + rx_a, 0, w - 1)]
        vb = occ[np.clip(kp.y + ry_b, 0, h - 1), np.clip(kp.x + rx_b, 0, w - 1)]
        out[i] = np.packbits(va > vb)
    return out


def extract_features(
    img: SphericalImage, max_count: int = 500
) -> tuple[list[Keypoint], np.ndarray]:
    """Detect keypoints and compute their descriptors in one call."""
    kps = detect_keypoints(img, max_count)
    return kps, describe(img, kps)


def hamming_matrix(desc_a: np.ndarray, desc_b: np.ndarray) -> np.ndarray:
    """(Na, Nb) int32 pairwise Hamming distances between packed descriptors."""
    xored = desc_a[:, None, :] ^ desc_b[None, :, :]
    return _POPCOUNT[xored].sum(axis=2, dtype=np.int32)


def _mutual_matches(
    kps_a: Sequence[Keypoint],
    desc_a: np.ndarray,
    kps_b: Sequence[Keypoint],
    desc_b: np.ndarray,
    top_k: int | None,
    image_pair_id: str = "",
) -> list[MatchPair]:
    dist = hamming_matrix(desc_a, desc_b)
    best_b = dist.argmin(axis=1)
    best_a = dist.argmin(axis=0)
    pairs = []
    for ia, ib in enumerate(best_b):
        if best_a[ib] == ia:
            pairs.append(
                MatchPair(
                    keypoint_a=kps_a[ia],
                    keypoint_b=kps_b[int(ib)],
                    hamming=int(dist[ia, ib]),
                    image_pair_id=image_pair_id,
                )
            )
    pairs.sort(key=lambda p: (p.hamming, p.keypoint_a.x, p.keypoint_a.y))
    return pairs if top_k is None else pairs[:top_k]


_SHIFT_BIN = 8  # pixels; histogram bin for the dominant-shift vote
_SHIFT_TOL = 6  # pixels; a match is shift-consistent within this of the mode


def _dominant_shift(matches: Sequence[MatchPair]) -> tuple[float, float] | None:
    """Dominant (dx, dy) raster shift voted by the matches.

    Two images of the same structure differ by one global raster shift
    (their angular origins differ). The shift is voted by a coarse 2D
    histogram and refined by the median of the winning bin's neighborhood.
    """
    if not matches:
        return None
    dx = np.array([m.keypoint_b.x - m.keypoint_a.x for m in matches])
    dy = np.array([m.keypoint_b.y - m.keypoint_a.y for m in matches])
    bins = np.stack(
        [np.round(dx / _SHIFT_BIN).astype(np.int64), np.round(dy / _SHIFT_BIN).astype(np.int64)]
    ).T
    keys, counts = np.unique(bins, axis=0, return_counts=True)
    kx, ky = keys[np.argmax(counts)]
    rough = (np.abs(dx - _SHIFT_BIN * kx) <= _SHIFT_BIN) & (
        np.abs(dy - _SHIFT_BIN * ky) <= _SHIFT_BIN
    )
    return float(np.median(dx[rough])), float(np.median(dy[rough]))


def _shift_consistent(matches: Sequence[MatchPair]) -> list[MatchPair]:
    """Matches agreeing with the dominant pixel shift between the images."""
    shift = _dominant_shift(matches)
    if shift is None:
        return []
    sx, sy = shift
    return [
        m
        for m in matches
        if abs(m.keypoint_b.x - m.keypoint_a.x - sx) <= _SHIFT_TOL
        and abs(m.keypoint_b.y - m.keypoint_a.y - sy) <= _SHIFT_TOL
    ]


def _structural_agreement(
    img_a: SphericalImage, img_b: SphericalImage, sx: int, sy: int
) -> float | None:
    """Column-normalized occupied-raster agreement under a pixel shift.

    Counts, per column, the fraction of occupied pixels explained by the
    other image (with one pixel of dilation slack), summed over columns and
    both directions. Normalizing per column keeps a tall vertical stem from
    dominating: it can contribute at most its handful of columns, while
    agreement across the crown's many columns is what certifies that two
    viewpoints really coincide.
    """
    occ_a = img_a.raster == 0
    occ_b = img_b.raster == 0
    ha, wa = occ_a.shape
    hb, wb = occ_b.shape
    x0a, x0b = max(0, -sx), max(0, sx)
    y0a, y0b = max(0, -sy), max(0, sy)
    w = min(wa - x0a, wb - x0b)
    h = min(ha - y0a, hb - y0b)
    if w <= 0 or h <= 0:
        return None
    a = occ_a[y0a : y0a + h, x0a : x0a + w]
    b = occ_b[y0b : y0b + h, x0b : x0b + w]
    a_dil = ndimage.maximum_filter(a, size=3)
    b_dil = ndimage.maximum_filter(b, size=3)
    count_a = a.sum(axis=0)
    count_b = b.sum(axis=0)
    frac_a = (a & b_dil).sum(axis=0) / np.maximum(count_a, 1)
    frac_b = (b & a_dil).sum(axis=0) / np.maximum(count_b, 1)
    return float(frac_a[count_a > 0].sum() + frac_b[count_b > 0].sum())


def match_images(
    img_a: SphericalImage,
    img_b: SphericalImage,
    top_k: int = 5,
    max_keypoints: int = 500,
) -> list[MatchPair]:
    """Best top_k mutual-nearest-neighbor matches between two images."""
    kps_a, desc_a = extract_features(img_a, max_keypoints)
    kps_b, desc_b = extract_features(img_b, max_keypoints)
    if len(kps_a) < top_k or len(kps_b) < top_k:
        raise TooFewKeypoints(
            f"need >= {top_k} keypoints per image, got {len(kps_a)} and {len(kps_b)}"
        )
    return _mutual_matches(kps_a, desc_a, kps_b, desc_b, top_k)


def select_similar_image_pairs(
    seq_a: ImageSequence,
    seq_b: ImageSequence,
    pair_count: int = 3,
    top_k: int = 5,
    max_keypoints: int = 500,
) -> list[SimilarImagePair]:
    """Best image combinations between two rotated sequences.

    Each (entry_a, entry_b) combination votes a global raster shift with its
    mutual matches, keeps the matches agreeing with it, and is scored by the
    column-normalized agreement of the two occupied rasters under that shift
    (a tall stem matches itself at every rotation, so whole-raster,
    column-weighted agreement is what separates genuinely similar viewpoints
    from stem-only coincidences). Because the correct alignment depends only
    on the rotation DIFFERENCE, combinations sharing the same quantized
    rotation difference pool their evidence; the pair_count best
    combinations with distinct entry_a rotations are drawn from the winning
    difference (topped up globally if it runs short). Each returned pair
    carries its top_k shift-consistent matches with smallest Hamming
    distance; its score is their mean Hamming.
    """
    feats_a = [_try_extract(e, max_keypoints) for e in seq_a.entries]
    feats_b = [_try_extract(e, max_keypoints) for e in seq_b.entries]
    theta = seq_a.theta

    combos = []
    for ia, (img_a, fa) in enumerate(zip(seq_a.entries, feats_a)):
        if fa is None or len(fa[0]) < top_k:
            continue
        for ib, (img_b, fb) in enumerate(zip(seq_b.entries, feats_b)):
            if fb is None or len(fb[0]) < top_k:
                continue
            pair_id = f"a{ia:02d}/b{ib:02d}"
            matches = _mutual_matches(fa[0], fa[1], fb[0], fb[1], None, pair_id)
            shift = _dominant_shift(matches)
            if shift is None:
                continue
            consistent = _shift_consistent(matches)
            if len(consistent) < top_k:
                continue
            strength = _structural_agreement(
                img_a, img_b, int(round(shift[0])), int(round(shift[1]))
            )
            if strength is None:
                continue
            best = consistent[:top_k]  # already Hamming-sorted
            rel = round((img_a.source_rotation - img_b.source_rotation) / theta)
            combos.append(
                {
                    "rel": rel,
                    "strength": strength,
                    "score": float(np.mean([m.hamming for m in best])),
                    "ia": ia,
                    "ib": ib,
                    "img_a": img_a,
                    "img_b": img_b,
                    "matches": tuple(best),
                }
            )
    if not combos:
        raise NoMatchableEntries("no image combination produced enough matches")

    # Rank rotation differences by the mean strength of their three
    # strongest combinations.
    by_rel: dict[int, list[dict]] = {}
    for c in combos:
        by_rel.setdefault(c["rel"], []).append(c)
    def _rel_rank(item):
        rel, cs = item
        strengths = sorted((c["strength"] for c in cs), reverse=True)[:3]
        scores = sorted(c["score"] for c in cs)[:3]
        return (-float(np.mean(strengths)), float(np.mean(scores)), rel)
    best_rel = min(by_rel.items(), key=_rel_rank)[0]

    def _combo_rank(c):
        return (-c["strength"], c["score"], c["ia"], c["ib"])

    selected: list[dict] = []
    used_rotations: set[float] = set()
    for pool in (sorted(by_rel[best_rel], key=_combo_rank), sorted(combos, key=_combo_rank)):
        for c in pool:
            if len(selected) == pair_count:
                break
            rot = c["img_a"].source_rotation
            if rot in used_rotations:
                continue
            used_rotations.add(rot)
            selected.append(c)
    return [
        SimilarImagePair(
            image_a=c["img_a"], image_b=c["img_b"], matches=c["matches"], score=c["score"]
        )
        for c in selected
    ]


def _try_extract(img: SphericalImage, max_keypoints: int):
    try:
        return extract_features(img, max_keypoints)
    except ImageTooSmall:
        return None


@dataclass(frozen=True)
class MatchVerificationReport:
    """Per-match vertical-position agreement check.

    d_k is the absolute difference of the matched pixels' lower beta bounds;
    matches whose d_k falls outside the open interval (mean - std, mean + std)
    are flagged for exclusion. Zero spread keeps everything: perfectly
    consistent matches must not be discarded by an empty interval.
    """

    distances: tuple[float, ...]
    mean: float
    std: float
    kept: tuple[bool, ...]
    beta_a: tuple[float, ...]
    beta_b: tuple[float, ...]

    @property
    def n_kept(self) -> int:
        return sum(self.kept)


def verify_matches(
    pairs: Sequence[SimilarImagePair], min_survivors: int = 4
) -> MatchVerificationReport:
    """Flag matches whose vertical image position disagrees across scans.

    Flattens all matches of the selected image pairs (in order), computes
    d_k = |beta_a - beta_b| from each match's row via its own image's
    angular mapping, and keeps matches inside the open mean +- std interval.
    """
    flat: list[tuple[MatchPair, SphericalImage, SphericalImage]] = [
        (m, p.image_a, p.image_b) for p in pairs for m in p.matches
    ]
    if len(flat) < 3:
        raise TooFewMatches(f"verification needs >= 3 matches, got {len(flat)}")
    beta_a = [img_a.beta_interval_low(m.keypoint_a.y) for m, img_a, _ in flat]
    beta_b = [img_b.beta_interval_low(m.keypoint_b.y) for m, _, img_b in flat]
    d = np.abs(np.array(beta_a) - np.array(beta_b))
    mean = float(d.mean())
    std = float(d.std())
    if std <= 1e-12 * max(1.0, abs(mean)):
        kept = tuple(True for _ in d)
    else:
        kept = tuple(bool(abs(dk - mean) < std) for dk in d)
    if sum(kept) < min_survivors:
        raise TooFewSurvivors(
            f"only {sum(kept)} matches survived verification; need >= {min_survivors}"
        )
    return MatchVerificationReport(
        distances=tuple(float(x) for x in d),
        mean=mean,
        std=std,
        kept=kept,
        beta_a=tuple(beta_a),
        beta_b=tuple(beta_b),
    )


def write_match_debug(pair: SimilarImagePair, image_path, sidecar_path) -> None:
    """Side-by-side PGM of the two images plus a plain-text match list."""
    from .projection import write_pgm  # local import to avoid cycle at module load

    h = max(pair.image_a.height, pair.image_b.height)
    w = pair.image_a.width + pair.image_b.width
    canvas = np.full((h, w), 255, dtype=np.uint8)
    canvas[: pair.image_a.height, : pair.image_a.width] = pair.image_a.raster
    canvas[: pair.image_b.height, pair.image_a.width :] = pair.image_b.raster
    with open(image_path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.flipud(canvas).tobytes())
    with open(sidecar_path, "w") as fh:
        for m in pair.matches:
            fh.write(
                f"{m.keypoint_a.x} {m.keypoint_a.y} "
                f"{m.keypoint_b.x} {m.keypoint_b.y} {m.hamming}\n"
            )
