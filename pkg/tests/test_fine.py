import math

import numpy as np
import pytest
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from treereg.errors import (
    CloudTooShort,
    CollinearPoints,
    DegenerateConfiguration,
    NoCorrespondences,
    TooFewPoints,
)
from treereg.fine import (
    Arc,
    ArcFit,
    CircleFit,
    CylinderFit,
    Layer,
    SliceParams,
    arc_tie_points,
    correspond_fits,
    fine_register,
    fit_circle_taubin,
    fit_cylinder_lsq,
    separate_arcs,
    slice_layers,
    verify_arcs,
)
from treereg.geometry import PointCloud, apply_transform, RigidTransform
from treereg.projection import ScannerSpec

from conftest import rotation_matrix

SPEC = ScannerSpec.from_degrees(0.06, 0.06)


def cloud_from_angles(alpha, beta, r=12.0):
    alpha = np.asarray(alpha)
    beta = np.asarray(beta)
    return PointCloud(
        np.c_[r * np.cos(beta) * np.cos(alpha), r * np.cos(beta) * np.sin(alpha),
              r * np.sin(beta)]
    )


class TestSliceLayers:
    def test_quartile_window_membership(self):
        z = np.linspace(0, 8, 801)
        cloud = PointCloud(np.c_[np.full_like(z, 10.0), np.zeros_like(z), z])
        layers = slice_layers(cloud, SliceParams())
        assert len(layers) == 3
        for layer, expected_h in zip(layers, (2.0, 4.0, 6.0)):
            assert layer.height_center == pytest.approx(expected_h)
            member_z = cloud.xyz[layer.indices, 2]
            assert (np.abs(member_z - expected_h) <= 0.05 + 1e-12).all()
            outside = np.setdiff1d(np.arange(len(cloud)), layer.indices)
            assert (np.abs(cloud.xyz[outside, 2] - expected_h) > 0.05 - 1e-12).all()

    def test_empty_window_allowed(self):
        z = np.concatenate([np.linspace(0, 3, 300), np.linspace(7, 8, 100)])
        cloud = PointCloud(np.c_[np.full_like(z, 10.0), np.zeros_like(z), z])
        layers = slice_layers(cloud, SliceParams(heights=(1.0, 5.0, 7.5)))
        assert len(layers[1]) == 0
        assert len(layers[0]) > 0 and len(layers[2]) > 0

    def test_cloud_too_short(self):
        cloud = PointCloud(np.c_[np.full(50, 10.0), np.zeros(50), np.linspace(0, 0.3, 50)])
        with pytest.raises(CloudTooShort):
            slice_layers(cloud, SliceParams())


def oracle_components(alpha, beta, spec):
    """Dense-graph connected components under the angular predicate,
    entirely independent of the sweep + union-find implementation."""
    da = np.abs(alpha[:, None] - alpha[None, :])
    da = np.minimum(da, 2 * np.pi - da)
    db = np.abs(beta[:, None] - beta[None, :])
    adj = (da <= 3 * spec.phi) & (db <= 3 * spec.vartheta)
    n_comp, label = connected_components(csr_matrix(adj), directed=False)
    return [np.nonzero(label == c)[0] for c in range(n_comp)]


class TestSeparateArcs:
    def test_uniform_spacing_single_arc(self):
        alpha = np.arange(30) * SPEC.phi
        cloud = cloud_from_angles(alpha, np.zeros_like(alpha))
        layer = Layer(height_center=0.0, thickness=0.1, indices=np.arange(30))
        arcs = separate_arcs(layer, cloud, SPEC, min_arc_points=5)
        assert len(arcs) == 1
        assert len(arcs[0]) == 30

    def test_gap_beyond_threshold_splits(self):
        first = np.arange(15) * SPEC.phi
        second = first + first[-1] + 4 * SPEC.phi
        alpha = np.concatenate([first, second])
        cloud = cloud_from_angles(alpha, np.zeros_like(alpha))
        layer = Layer(height_center=0.0, thickness=0.1, indices=np.arange(30))
        arcs = separate_arcs(layer, cloud, SPEC, min_arc_points=5)
        assert len(arcs) == 2

    def test_gap_at_threshold_connects(self):
        first = np.arange(15) * SPEC.phi
        second = first + first[-1] + 2.9 * SPEC.phi
        alpha = np.concatenate([first, second])
        cloud = cloud_from_angles(alpha, np.zeros_like(alpha))
        layer = Layer(height_center=0.0, thickness=0.1, indices=np.arange(30))
        assert len(separate_arcs(layer, cloud, SPEC, min_arc_points=5)) == 1

    def test_beta_gap_also_splits(self):
        alpha = np.arange(30) * SPEC.phi
        beta = np.where(np.arange(30) < 15, 0.0, 4 * SPEC.vartheta)
        cloud = cloud_from_angles(alpha, beta)
        layer = Layer(height_center=0.0, thickness=0.1, indices=np.arange(30))
        arcs = separate_arcs(layer, cloud, SPEC, min_arc_points=5)
        assert len(arcs) == 2

    def test_small_components_dropped(self):
        alpha = np.concatenate([np.arange(20) * SPEC.phi, [1.0, 1.0 + SPEC.phi]])
        cloud = cloud_from_angles(alpha, np.zeros_like(alpha))
        layer = Layer(height_center=0.0, thickness=0.1, indices=np.arange(22))
        arcs = separate_arcs(layer, cloud, SPEC, min_arc_points=10)
        assert len(arcs) == 1
        assert len(arcs[0]) == 20

    def test_wraparound_connects_across_branch_cut(self):
        # An arc straddling alpha = pi: one run ending just below pi and
        # another starting just above -pi.
        alpha = np.concatenate(
            [math.pi - np.arange(10)[::-1] * SPEC.phi,
             -math.pi + np.arange(1, 11) * SPEC.phi]
        )
        cloud = cloud_from_angles(alpha, np.zeros_like(alpha))
        layer = Layer(height_center=0.0, thickness=0.1, indices=np.arange(20))
        arcs = separate_arcs(layer, cloud, SPEC, min_arc_points=5)
        assert len(arcs) == 1

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_dense_graph_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n_clusters = rng.integers(2, 7)
        alpha_list, beta_list = [], []
        for _ in range(n_clusters):
            center_a = rng.uniform(-math.pi, math.pi)
            center_b = rng.uniform(-0.1, 0.1)
            count = rng.integers(5, 60)
            alpha_list.append(center_a + np.cumsum(rng.uniform(0, 4, count)) * SPEC.phi)
            beta_list.append(center_b + rng.uniform(-2, 2, count) * SPEC.vartheta)
        alpha = np.mod(np.concatenate(alpha_list) + math.pi, 2 * math.pi) - math.pi
        beta = np.concatenate(beta_list)
        cloud = cloud_from_angles(alpha, beta)
        layer = Layer(height_center=0.0, thickness=10.0, indices=np.arange(len(alpha)))
        arcs = separate_arcs(layer, cloud, SPEC, min_arc_points=1)
        got = {frozenset(a.indices.tolist()) for a in arcs}
        expected = {
            frozenset(c.tolist()) for c in oracle_components(alpha, beta, SPEC)
        }
        assert got == expected


class TestCircleFit:
    def test_exact_full_circle(self):
        t = np.linspace(0, 2 * math.pi, 100, endpoint=False)
        fit = fit_circle_taubin(np.c_[1 + 2 * np.cos(t), 1 + 2 * np.sin(t)])
        assert abs(fit.center_x - 1) <= 1e-9
        assert abs(fit.center_y - 1) <= 1e-9
        assert abs(fit.radius - 2) <= 1e-9
        assert fit.rms <= 1e-9

    def test_half_arc(self):
        t = np.linspace(0, math.pi, 120)
        fit = fit_circle_taubin(np.c_[1 + 2 * np.cos(t), 1 + 2 * np.sin(t)])
        assert abs(fit.center_x - 1) <= 1e-6
        assert abs(fit.center_y - 1) <= 1e-6
        assert abs(fit.radius - 2) <= 1e-6

    def test_collinear_raises(self):
        with pytest.raises(CollinearPoints):
            fit_circle_taubin(np.c_[np.arange(3.0), np.arange(3.0)])

    def test_too_few_points(self):
        t = np.linspace(0, 2, 5)
        with pytest.raises(TooFewPoints):
            fit_circle_taubin(np.c_[np.cos(t), np.sin(t)])

    def test_rigid_motion_covariance(self):
        rng = np.random.default_rng(0)
        t = rng.uniform(0, math.pi, 50)
        pts = np.c_[3 * np.cos(t), 3 * np.sin(t)]
        fit0 = fit_circle_taubin(pts)
        angle = 0.8
        rot = np.array([[math.cos(angle), -math.sin(angle)],
                        [math.sin(angle), math.cos(angle)]])
        moved = pts @ rot.T + [5.0, -2.0]
        fit1 = fit_circle_taubin(moved)
        expected_center = rot @ [fit0.center_x, fit0.center_y] + [5.0, -2.0]
        np.testing.assert_allclose([fit1.center_x, fit1.center_y], expected_center,
                                   atol=1e-9)
        assert fit1.radius == pytest.approx(fit0.radius, abs=1e-9)


def cylinder_points(rng, n, radius, length, direction=(0, 0, 1.0), center=(0, 0, 0),
                    arc=(0, 2 * math.pi), noise=0.0):
    direction = np.asarray(direction, dtype=float)
    direction /= np.linalg.norm(direction)
    ref = np.array([0, 0, 1.0]) if abs(direction[2]) < 0.9 else np.array([1.0, 0, 0])
    e1 = np.cross(direction, ref)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(direction, e1)
    psi = rng.uniform(*arc, n)
    s = rng.uniform(-length / 2, length / 2, n)
    pts = (np.asarray(center)
           + np.outer(s, direction)
           + radius * (np.outer(np.cos(psi), e1) + np.outer(np.sin(psi), e2)))
    if noise > 0:
        pts = pts + rng.normal(0, noise, pts.shape)
    return pts


class TestCylinderFit:
    def test_exact_vertical(self):
        rng = np.random.default_rng(1)
        pts = cylinder_points(rng, 200, 0.5, 1.0)
        fit = fit_cylinder_lsq(pts)
        assert abs(abs(fit.direction[2]) - 1) <= 1e-12
        assert abs(fit.radius - 0.5) <= 1e-9
        assert fit.converged

    def test_exact_tilted(self):
        rng = np.random.default_rng(2)
        direction = rotation_matrix([1, 0, 0], math.radians(30)) @ [0, 0, 1]
        pts = cylinder_points(rng, 200, 0.5, 1.0, direction, center=(3, -2, 5))
        fit = fit_cylinder_lsq(pts)
        angle = math.acos(np.clip(abs(fit.direction @ direction), 0, 1))
        assert angle <= 1e-6
        assert abs(fit.radius - 0.5) <= 1e-9

    def test_direction_sign_normalized(self):
        rng = np.random.default_rng(3)
        pts = cylinder_points(rng, 100, 0.2, 0.6, direction=(0.3, -0.2, -0.93))
        fit = fit_cylinder_lsq(pts)
        assert fit.direction[2] >= 0

    def test_noisy_slices_regime(self):
        # Branch-like slices: 10 cm radius, 0.3 m extent, 5 mm noise.
        errs_r, errs_a = [], []
        for trial in range(40):
            rng = np.random.default_rng(trial)
            pts = cylinder_points(rng, 400, 0.1, 0.3, noise=0.005)
            fit = fit_cylinder_lsq(pts)
            errs_r.append(abs(fit.radius - 0.1))
            errs_a.append(math.acos(np.clip(abs(fit.direction[2]), 0, 1)))
        assert np.percentile(errs_r, 95) <= 0.003
        assert np.percentile(errs_a, 95) <= math.radians(1.0)

    def test_too_few_points(self):
        with pytest.raises(TooFewPoints):
            fit_cylinder_lsq(np.zeros((5, 3)))

    def test_coplanar_through_axis_degenerate(self):
        # Two parallel lines: every cylinder through them shares the plane.
        z = np.linspace(0, 1, 30)
        pts = np.r_[np.c_[np.zeros(30), np.full(30, -0.5), z],
                    np.c_[np.zeros(30), np.full(30, 0.5), z]]
        with pytest.raises(DegenerateConfiguration):
            fit_cylinder_lsq(pts)

    def test_half_arc_occluded_slice(self):
        # One-sided visibility, as a single scan sees a branch.
        rng = np.random.default_rng(4)
        pts = cylinder_points(rng, 300, 0.1, 0.3, arc=(-math.pi / 2, math.pi / 2),
                              noise=0.003)
        fit = fit_cylinder_lsq(pts)
        assert abs(fit.radius - 0.1) <= 0.01
        assert math.acos(np.clip(abs(fit.direction[2]), 0, 1)) <= math.radians(2)


class TestArcTiePoints:
    def test_circle_center(self):
        fit = CircleFit(center_x=1.0, center_y=2.0, radius=0.2, rms=0.0)
        (tie,) = arc_tie_points(fit, 3.0)
        np.testing.assert_allclose(tie, [1, 2, 3])

    def test_vertical_cylinder_offset(self):
        fit = CylinderFit(axis_point=[0, 0, 4.7], direction=[0, 0, 1], radius=0.1,
                          rms=0.0)
        base, offset = arc_tie_points(fit, 5.0)
        np.testing.assert_allclose(base, [0, 0, 5])
        np.testing.assert_allclose(offset, [0, 0, 6])

    def test_downward_direction_flipped(self):
        fit = CylinderFit(axis_point=[0, 0, 5.0], direction=[0, 0, -1], radius=0.1,
                          rms=0.0)
        base, offset = arc_tie_points(fit, 5.0)
        np.testing.assert_allclose(offset - base, [0, 0, 1])

    def test_tilted_cylinder_base_at_layer_height(self):
        d = np.array([0.6, 0.0, 0.8])
        fit = CylinderFit(axis_point=[1, 1, 1], direction=d, radius=0.1, rms=0.0)
        base, offset = arc_tie_points(fit, 2.0, unit_offset=0.5)
        assert base[2] == pytest.approx(2.0)
        np.testing.assert_allclose(offset, base + 0.5 * d)

    def test_horizontal_axis_tiebreak(self):
        fit = CylinderFit(axis_point=[1, 2, 3], direction=[-1, 0, 0], radius=0.1,
                          rms=0.0)
        base, offset = arc_tie_points(fit, 99.0)
        np.testing.assert_allclose(base, [1, 2, 3])  # no z re-parameterization
        np.testing.assert_allclose(offset - base, [1, 0, 0])  # oriented a > 0


def stub_fit(layer_index, height, x, y, radius, kind="cylinder", index=0):
    arc = Arc(indices=np.array([index]), layer_index=layer_index)
    if kind == "circle":
        fit = CircleFit(center_x=x, center_y=y, radius=radius, rms=0.001)
        ties = (np.array([x, y, height]),)
    else:
        fit = CylinderFit(axis_point=[x, y, height], direction=[0, 0, 1.0],
                          radius=radius, rms=0.001)
        ties = (np.array([x, y, height]), np.array([x, y, height + 1.0]))
    return ArcFit(layer_index=layer_index, layer_height=height, arc=arc, fit=fit,
                  tie_points=ties)


class TestVerifyArcs:
    def test_monotone_decreasing_kept(self):
        fits = [stub_fit(0, 2.0, 0, 0, 0.3), stub_fit(1, 4.0, 0, 0, 0.2, index=1)]
        accepted, rejected = verify_arcs(fits)
        assert len(accepted) == 2 and not rejected

    def test_thickening_rejected(self):
        fits = [stub_fit(0, 2.0, 0, 0, 0.2), stub_fit(1, 4.0, 0, 0, 0.5, index=1)]
        accepted, rejected = verify_arcs(fits)
        assert len(accepted) == 1
        assert rejected and rejected[0][0].radius == 0.5

    def test_equal_radii_kept(self):
        fits = [stub_fit(0, 2.0, 0, 0, 0.3), stub_fit(1, 4.0, 0, 0, 0.3, index=1)]
        accepted, rejected = verify_arcs(fits)
        assert len(accepted) == 2 and not rejected

    def test_distant_fit_not_linked(self):
        # A fat fit far from any lower fit has no parent to compare against.
        fits = [stub_fit(0, 2.0, 0, 0, 0.2), stub_fit(1, 4.0, 5.0, 0, 0.5, index=1)]
        accepted, rejected = verify_arcs(fits)
        assert len(accepted) == 2 and not rejected


class TestCorrespondFits:
    def test_identical_sets_pair_exactly(self):
        fits = [stub_fit(0, 2.0, 0, 0, 0.3, kind="circle"),
                stub_fit(1, 4.0, 1, 1, 0.1, index=1),
                stub_fit(2, 6.0, -1, 2, 0.08, index=2)]
        pairs, un_t, un_r = correspond_fits(fits, fits)
        assert not un_t and not un_r
        assert len(pairs) == 1 + 2 + 2
        for p in pairs:
            np.testing.assert_allclose(p.target_point, p.reference_point)

    def test_small_offset_still_pairs(self):
        fits_t = [stub_fit(1, 4.0, 1, 1, 0.1), stub_fit(2, 6.0, -1, 2, 0.08, index=1)]
        fits_r = [stub_fit(1, 4.0, 1.1, 1, 0.1), stub_fit(2, 6.0, -0.9, 2, 0.08, index=1)]
        pairs, un_t, un_r = correspond_fits(fits_t, fits_r)
        assert not un_t and not un_r

    def test_spurious_fit_unmatched(self):
        fits_t = [stub_fit(1, 4.0, 1, 1, 0.1), stub_fit(1, 4.0, 3.0, 1, 0.1, index=1)]
        fits_r = [stub_fit(1, 4.0, 1, 1, 0.1)]
        pairs, un_t, un_r = correspond_fits(fits_t, fits_r)
        assert len(un_t) == 1
        assert un_t[0].anchor[0] == pytest.approx(3.0)

    def test_kind_mismatch_never_pairs(self):
        fits_t = [stub_fit(0, 2.0, 0, 0, 0.3, kind="circle")]
        fits_r = [stub_fit(0, 2.0, 0, 0, 0.3, kind="cylinder")]
        with pytest.raises(NoCorrespondences):
            correspond_fits(fits_t, fits_r)

    def test_offset_weight_propagates(self):
        fits = [stub_fit(1, 4.0, 1, 1, 0.1)]
        pairs, _, _ = correspond_fits(fits, fits, offset_weight=0.25)
        assert pairs[0].weight == 1.0
        assert pairs[1].weight == 0.25


class TestFineRegister:
    def test_self_registration_identity(self, dataset):
        cloud = dataset.scans[0].cloud
        result = fine_register(cloud, cloud, dataset.spec)
        assert np.linalg.norm(result.transform.rotation - np.eye(3)) <= 1e-6
        assert np.linalg.norm(result.transform.translation) <= 1e-3

    def test_recovers_small_translation(self, dataset):
        reference = dataset.scans[0].cloud
        target = PointCloud(reference.xyz + [0.05, 0.0, 0.0])
        result = fine_register(target, reference, dataset.spec)
        recovered = result.transform.apply(target.xyz) - reference.xyz
        assert float(np.linalg.norm(recovered.mean(axis=0))) <= 0.005

    def test_inventory_reports_fits(self, dataset):
        cloud = dataset.scans[0].cloud
        result = fine_register(cloud, cloud, dataset.spec)
        assert any(e.get("status") == "fitted" for e in result.inventory)
        sides = {e["side"] for e in result.inventory}
        assert sides == {"target", "reference"}

    def test_json_document(self, dataset):
        import json

        cloud = dataset.scans[0].cloud
        result = fine_register(cloud, cloud, dataset.spec)
        doc = json.loads(result.to_json())
        assert doc["transform"]["frame"] == "coarse→reference"
        assert doc["arc_inventory"]
