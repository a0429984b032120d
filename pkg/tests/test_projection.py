import math

import numpy as np
import pytest

from treereg.errors import DegeneratePoint, EmptyBucket, EmptyCloud
from treereg.geometry import PointCloud
from treereg.projection import (
    ScannerSpec,
    generate_image_sequence,
    pixel_region_centroid,
    project,
    sequence_rotation_angles,
    spherical_angles,
    write_pgm,
)


@pytest.fixture
def fine_spec():
    return ScannerSpec.from_degrees(0.05, 0.05)


def shell_cloud(rng, n=5000, alpha_span=(0.0, 0.4), beta_span=(-0.2, 0.3)):
    a = rng.uniform(*alpha_span, n)
    b = rng.uniform(*beta_span, n)
    r = rng.uniform(5.0, 15.0, n)
    return PointCloud(
        np.c_[r * np.cos(b) * np.cos(a), r * np.cos(b) * np.sin(a), r * np.sin(b)]
    )


class TestSphericalAngles:
    def test_on_x_axis(self):
        assert spherical_angles([1, 0, 0]) == (0.0, 0.0)

    def test_on_y_axis(self):
        alpha, beta = spherical_angles([0, 1, 0])
        assert alpha == pytest.approx(math.pi / 2)
        assert beta == 0.0

    def test_diagonal(self):
        alpha, beta = spherical_angles([1, 1, math.sqrt(2)])
        assert alpha == pytest.approx(math.pi / 4, abs=1e-12)
        assert beta == pytest.approx(math.pi / 4, abs=1e-12)

    @pytest.mark.parametrize("p", [[0, 0, 0], [0, 0, 1], [0, 0, -3]])
    def test_degenerate(self, p):
        with pytest.raises(DegeneratePoint):
            spherical_angles(p)


class TestProject:
    def test_single_point(self, fine_spec):
        img = project(PointCloud([[1, 0, 0]]), fine_spec, r1=2, r2=2)
        assert img.raster[2, 2] == 0
        assert set(img.buckets) == {(2, 2)}
        assert (img.raster == 255).sum() == img.width * img.height - 1

    def test_size_formula(self, fine_spec):
        # alpha spanning [0, 10) deg and beta [0, 5) deg at 0.05 deg steps:
        # ceil(10/0.1 + 4) x ceil(5/0.1 + 4).
        rng = np.random.default_rng(0)
        a = np.deg2rad(rng.uniform(0, 9.9999, 4000))
        b = np.deg2rad(rng.uniform(0, 4.9999, 4000))
        a[0], a[1] = 0.0, np.deg2rad(9.9999)
        b[0], b[1] = 0.0, np.deg2rad(4.9999)
        pts = np.c_[np.cos(b) * np.cos(a), np.cos(b) * np.sin(a), np.sin(b)]
        img = project(PointCloud(pts), fine_spec, r1=2, r2=2)
        assert (img.width, img.height) == (104, 54)

    def test_duplicate_angles_share_bucket(self, fine_spec):
        img = project(PointCloud([[1, 0, 0], [2, 0, 0]]), fine_spec, r1=2, r2=2)
        assert len(img.buckets) == 1
        assert len(next(iter(img.buckets.values()))) == 2

    def test_empty_cloud(self, fine_spec):
        with pytest.raises(EmptyCloud):
            project(PointCloud(np.empty((0, 3))), fine_spec)

    def test_degenerate_points_dropped_and_counted(self, fine_spec):
        img = project(PointCloud([[0, 0, 1], [1, 0, 0], [2, 0, 1]]), fine_spec)
        assert img.dropped_degenerate == 1
        assert sum(len(v) for v in img.buckets.values()) == 2

    def test_bucket_partition_and_pixel_formula(self, fine_spec):
        rng = np.random.default_rng(1)
        cloud = shell_cloud(rng)
        img = project(cloud, fine_spec)
        assert sum(len(v) for v in img.buckets.values()) == len(cloud)
        for (x, y), members in img.buckets.items():
            assert img.raster[y, x] == 0
            for idx in members[:5]:
                assert img.pixel_of_point(cloud.xyz[idx]) == (x, y)

    def test_occupied_iff_bucket(self, fine_spec):
        rng = np.random.default_rng(2)
        img = project(shell_cloud(rng, n=800), fine_spec)
        occupied = {(x, y) for y, x in zip(*np.nonzero(img.raster == 0))}
        assert occupied == set(img.buckets)

    def test_border_empty(self, fine_spec):
        rng = np.random.default_rng(3)
        img = project(shell_cloud(rng), fine_spec, r1=8, r2=8)
        assert (img.raster[:, :8] == 255).all()
        assert (img.raster[:, -8:] == 255).all()
        assert (img.raster[:8, :] == 255).all()
        assert (img.raster[-8:, :] == 255).all()

    def test_radial_scaling_invariance(self, fine_spec):
        rng = np.random.default_rng(4)
        cloud = shell_cloud(rng, n=3000)
        img1 = project(cloud, fine_spec)
        img2 = project(PointCloud(cloud.xyz * 2.5), fine_spec)
        assert np.array_equal(img1.raster, img2.raster)

    def test_branch_cut_straddling_recenters(self, fine_spec):
        # A cloud hugging the -x axis: raw alpha spans nearly 2*pi, but the
        # occupied arc is narrow after circular re-centering.
        rng = np.random.default_rng(5)
        a = np.pi + rng.uniform(-0.1, 0.1, 2000)
        pts = np.c_[np.cos(a), np.sin(a), rng.uniform(-0.2, 0.2, 2000)]
        img = project(PointCloud(pts), fine_spec)
        assert img.alpha_shift != 0.0
        span = img.alpha_max - img.alpha_min
        assert span < 0.25
        for (x, y), members in img.buckets.items():
            for idx in members[:3]:
                assert img.pixel_of_point(pts[idx]) == (x, y)


class TestPixelRegionCentroid:
    def test_single_point_bucket(self, fine_spec):
        cloud = PointCloud([[1, 0, 0]])
        img = project(cloud, fine_spec, r1=2, r2=2)
        np.testing.assert_allclose(pixel_region_centroid(img, cloud, (2, 2)), [1, 0, 0])

    def test_two_point_mean(self, fine_spec):
        cloud = PointCloud([[1, 0, 0], [1, 0, 2]])
        img = project(cloud, fine_spec)
        # both points share alpha=0 but differ in beta; use each bucket
        for (x, y), members in img.buckets.items():
            centroid = pixel_region_centroid(img, cloud, (x, y))
            np.testing.assert_allclose(centroid, cloud.xyz[members].mean(axis=0))

    def test_mean_against_bruteforce(self, fine_spec):
        rng = np.random.default_rng(6)
        cloud = shell_cloud(rng, n=500)
        img = project(cloud, fine_spec)
        (x, y), members = max(img.buckets.items(), key=lambda kv: len(kv[1]))
        expected = np.zeros(3)
        for idx in members:
            expected += cloud.xyz[idx]
        expected /= len(members)
        np.testing.assert_allclose(pixel_region_centroid(img, cloud, (x, y)), expected,
                                   atol=1e-12)

    def test_empty_bucket(self, fine_spec):
        cloud = PointCloud([[1, 0, 0]])
        img = project(cloud, fine_spec, r1=2, r2=2)
        with pytest.raises(EmptyBucket):
            pixel_region_centroid(img, cloud, (0, 0))


class TestImageSequence:
    def test_rotation_progression(self):
        angles = sequence_rotation_angles(math.radians(10), 3)
        assert len(angles) == 24
        np.testing.assert_allclose(np.degrees(angles), np.arange(-120, 120, 10),
                                   atol=1e-9)

    @pytest.mark.parametrize(
        "n_scans,theta_deg,expected",
        [(3, 10, 24), (2, 15, 24), (4, 10, 18), (3, 20, 12)],
    )
    def test_sequence_length_formula(self, n_scans, theta_deg, expected):
        angles = sequence_rotation_angles(math.radians(theta_deg), n_scans)
        assert len(angles) == expected == math.floor(720 / (n_scans * theta_deg))

    def test_uneven_step_warns_and_truncates(self):
        with pytest.warns(UserWarning, match="truncated"):
            angles = sequence_rotation_angles(math.radians(7), 4)
        assert len(angles) == math.floor(720 / (4 * 7))

    def test_zero_rotation_entry_matches_plain_projection(self, fine_spec):
        rng = np.random.default_rng(7)
        cloud = shell_cloud(rng, n=2000)
        seq = generate_image_sequence(cloud, fine_spec, math.radians(30), 3)
        base = project(cloud, fine_spec)
        entry = next(e for e in seq.entries if e.source_rotation == 0.0)
        assert np.array_equal(entry.raster, base.raster)
        assert entry.alpha_min == base.alpha_min
        assert entry.beta_min == base.beta_min

    def test_rotationally_symmetric_cloud_counts_stable(self, fine_spec):
        # Dense cylinder shell centered on its own centroid axis: every
        # rotated view occupies the same pixels up to discretization.
        rng = np.random.default_rng(8)
        n = 20000
        psi = rng.uniform(0, 2 * np.pi, n)
        z = rng.uniform(-1, 1, n)
        pts = np.c_[10 + np.cos(psi), np.sin(psi), z]
        seq = generate_image_sequence(PointCloud(pts), fine_spec, math.radians(10), 3)
        counts = np.array([(e.raster == 0).sum() for e in seq.entries])
        assert counts.max() - counts.min() <= 0.02 * counts.mean()

    def test_entries_carry_rotation_metadata(self, fine_spec):
        rng = np.random.default_rng(9)
        cloud = shell_cloud(rng, n=1000)
        seq = generate_image_sequence(cloud, fine_spec, math.radians(20), 2)
        assert seq.rotations == tuple(e.source_rotation for e in seq.entries)
        assert all(e.rotation_center == seq.rotation_center for e in seq.entries)


class TestPgmExport:
    def test_header_and_payload(self, fine_spec, tmp_path):
        rng = np.random.default_rng(10)
        img = project(shell_cloud(rng, n=300), fine_spec)
        path = tmp_path / "scan.pgm"
        write_pgm(img, path)
        data = path.read_bytes()
        header = f"P5\n{img.width} {img.height}\n255\n".encode()
        assert data.startswith(header)
        payload = np.frombuffer(data[len(header):], dtype=np.uint8)
        assert payload.size == img.width * img.height
        np.testing.assert_array_equal(
            payload.reshape(img.height, img.width), np.flipud(img.raster)
        )
