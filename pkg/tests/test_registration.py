import numpy as np
import pytest

from reconplan.geometry import Plane
from reconplan.registration import (
    DeformationField,
    RegistrationError,
    RigidTransform,
    apply_field,
    cpd_register,
    extract_scs,
    rigid_init,
    similarity_fit,
    tmj_blend,
    tmj_weights,
    transfer_landmark,
)

from conftest import icosphere, random_rotation


def blob(rng, n=200, scale=20.0):
    """Structured, non-degenerate test cloud (two lobes plus a ridge)."""
    a = rng.normal(size=(n // 2, 3)) * [4, 2, 1] + [0, 0, 0]
    b = rng.normal(size=(n - n // 2, 3)) * [1, 3, 2] + [scale * 0.4, scale * 0.2, 0]
    return np.vstack([a, b])


class TestRigidInit:
    def test_identity_for_identical_clouds(self, rng):
        pts = blob(rng)
        t = rigid_init(pts, pts)
        np.testing.assert_allclose(t.rotation, np.eye(3), atol=1e-9)
        np.testing.assert_allclose(t.translation, np.zeros(3), atol=1e-9)

    def test_recovers_known_transform(self, rng):
        for _ in range(20):
            pts = blob(rng, n=150)
            r0 = random_rotation(rng)
            t0 = rng.uniform(-30, 30, size=3)
            target = pts @ r0.T + t0
            t = rigid_init(pts, target)
            assert np.max(np.abs(t.rotation - r0)) < 1e-6
            assert np.max(np.abs(t.translation - t0)) < 1e-6

    def test_noisy_target_residual_bounded(self, rng):
        pts = blob(rng, n=300)
        diag = np.linalg.norm(pts.max(axis=0) - pts.min(axis=0))
        noise = 0.01 * diag
        r0 = random_rotation(rng)
        target = pts @ r0.T + rng.uniform(-5, 5, 3) + rng.normal(size=pts.shape) * noise
        t = rigid_init(pts, target)
        rms = np.sqrt(np.mean(np.sum((t.apply(pts) - target) ** 2, axis=1)))
        assert rms <= 2.0 * noise * np.sqrt(3)

    def test_rotation_always_proper(self, rng):
        for _ in range(30):
            a = blob(rng, n=60)
            b = blob(rng, n=80)
            t = rigid_init(a, b)
            assert np.linalg.det(t.rotation) == pytest.approx(1.0, abs=1e-9)

    def test_collinear_cloud_rejected(self):
        line = np.stack([np.arange(10.0), np.zeros(10), np.zeros(10)], axis=1)
        with pytest.raises(RegistrationError):
            rigid_init(line, line + 1.0)

    def test_transform_validation(self):
        with pytest.raises(RegistrationError):
            RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))  # improper
        with pytest.raises(RegistrationError):
            RigidTransform(np.eye(3) * 2.0, np.zeros(3))  # not orthonormal


class TestCpd:
    def test_identical_clouds_stay_put(self, rng):
        pts = blob(rng, n=150)
        diag = np.linalg.norm(pts.max(axis=0) - pts.min(axis=0))
        field = cpd_register(pts, pts)
        moved = apply_field(field, pts)
        assert np.max(np.linalg.norm(moved - pts, axis=1)) < 1e-6 * diag

    def test_constant_translation_recovered(self, rng):
        pts = blob(rng, n=200)
        diag = np.linalg.norm(pts.max(axis=0) - pts.min(axis=0))
        shift = 0.05 * diag * np.array([1.0, 0.0, 0.0])
        target = pts + shift
        field = cpd_register(pts, target)
        moved = apply_field(field, pts)
        rms_before = np.sqrt(np.mean(np.sum((pts - target) ** 2, axis=1)))
        rms_after = np.sqrt(np.mean(np.sum((moved - target) ** 2, axis=1)))
        mean_err = np.mean(np.linalg.norm(moved - target, axis=1))
        assert mean_err < 0.05 * np.linalg.norm(shift)
        assert rms_after <= 0.2 * rms_before  # >= 80% reduction

    def test_smooth_warp_improves_rms(self, rng):
        pts = blob(rng, n=250)
        diag = np.linalg.norm(pts.max(axis=0) - pts.min(axis=0))
        warp = 0.03 * diag * np.stack(
            [np.sin(pts[:, 1] / diag * 6), np.cos(pts[:, 0] / diag * 6), np.zeros(len(pts))],
            axis=1,
        )
        target = pts + warp
        field = cpd_register(pts, target)
        moved = apply_field(field, pts)
        rms_before = np.sqrt(np.mean(np.sum((pts - target) ** 2, axis=1)))
        rms_after = np.sqrt(np.mean(np.sum((moved - target) ** 2, axis=1)))
        assert rms_after < rms_before

    def test_objective_nonincreasing_on_fixtures(self, rng):
        pts = blob(rng, n=120)
        diag = np.linalg.norm(pts.max(axis=0) - pts.min(axis=0))
        fixtures = [
            pts,
            pts + 0.05 * diag * np.array([1.0, 0, 0]),
            pts + 0.02 * diag * np.stack(
                [np.sin(pts[:, 1] / diag * 5), np.zeros(len(pts)), np.cos(pts[:, 0] / diag * 5)],
                axis=1,
            ),
        ]
        for target in fixtures:
            field = cpd_register(pts, target)
            trace = np.array(field.objective_trace)
            assert len(trace) >= 2
            assert np.all(np.diff(trace) <= 1e-10 * np.maximum(1.0, np.abs(trace[:-1])))

    def test_max_iters_flags_not_converged(self, rng):
        pts = blob(rng, n=80)
        field = cpd_register(pts, pts + 3.0, max_iters=1)
        assert not field.converged

    def test_parameter_validation(self, rng):
        pts = blob(rng, n=30)
        with pytest.raises(RegistrationError):
            cpd_register(pts, pts, w_outlier=1.0)
        with pytest.raises(RegistrationError):
            cpd_register(pts, pts, lam=0.0)
        with pytest.raises(RegistrationError):
            cpd_register(pts, pts, beta=-1.0)


class TestApplyField:
    def test_zero_coefficients_identity(self, rng):
        pts = blob(rng, n=50)
        field = DeformationField(pts, np.zeros_like(pts), beta=5.0)
        np.testing.assert_array_equal(apply_field(field, pts), pts)

    def test_isolated_control_point_moves_by_its_coefficient(self):
        controls = np.array([[0.0, 0, 0], [1000.0, 0, 0]])
        coeffs = np.array([[1.0, 2.0, 3.0], [-1.0, 0.0, 0.0]])
        field = DeformationField(controls, coeffs, beta=1.0)
        moved = apply_field(field, np.array([0.0, 0, 0]))
        np.testing.assert_allclose(moved, [1.0, 2.0, 3.0], atol=1e-12)

    def test_linear_in_coefficients(self, rng):
        controls = blob(rng, n=40)
        w = rng.normal(size=controls.shape)
        x = rng.normal(size=3) * 5
        f1 = DeformationField(controls, w, beta=4.0)
        f2 = DeformationField(controls, 2.0 * w, beta=4.0)
        d1 = apply_field(f1, x) - x
        d2 = apply_field(f2, x) - x
        np.testing.assert_allclose(d2, 2.0 * d1, rtol=1e-12)


class TestTransferLandmark:
    def test_uniform_displacement_passes_through(self, rng):
        controls = blob(rng, n=60)
        # build a field whose induced control displacements are exactly delta:
        # G @ w = delta has a solution since G is SPD
        from reconplan.registration import _gauss_kernel

        delta = np.array([2.0, -1.0, 0.5])
        g = _gauss_kernel(controls, controls, 5.0)
        w = np.linalg.solve(g + 1e-12 * np.eye(len(controls)), np.tile(delta, (len(controls), 1)))
        field = DeformationField(controls, w, beta=5.0)
        p = rng.normal(size=3) * 10
        np.testing.assert_allclose(transfer_landmark(p, field), p + delta, atol=1e-6)

    def test_single_control_point(self):
        field = DeformationField(np.array([[1.0, 1, 1]]), np.array([[0.5, 0, 0]]), beta=0.5)
        far_point = np.array([500.0, 0, 0])
        moved = transfer_landmark(far_point, field)
        delta = apply_field(field, field.control_points[0]) - field.control_points[0]
        np.testing.assert_allclose(moved, far_point + delta, atol=1e-12)

    def test_result_in_convex_hull_of_shifted_points(self, rng):
        controls = blob(rng, n=25)
        w = rng.normal(size=controls.shape) * 0.3
        field = DeformationField(controls, w, beta=6.0)
        p = rng.normal(size=3) * 5
        displacements = apply_field(field, controls) - controls
        moved = transfer_landmark(p, field)
        # weights are a convex combination, so the update is within the
        # bounding box of the control displacements
        delta = moved - p
        assert np.all(delta >= displacements.min(axis=0) - 1e-12)
        assert np.all(delta <= displacements.max(axis=0) + 1e-12)

    def test_works_at_extreme_distance(self):
        # shifted weights keep the single-control case exact at any range
        field = DeformationField(np.array([[0.0, 0, 0]]), np.array([[1.0, 0, 0]]), beta=0.1)
        moved = transfer_landmark(np.array([1e4, 0, 0]), field)
        np.testing.assert_allclose(moved, [1e4 + 1.0, 0, 0])

    def test_non_finite_distance_raises(self):
        field = DeformationField(np.array([[0.0, 0, 0]]), np.array([[1.0, 0, 0]]), beta=0.1)
        with pytest.raises(RegistrationError, match="influence"):
            transfer_landmark(np.array([1e200, 0, 0]), field)


class TestTmjBlend:
    def test_equidistant_point_splits_evenly(self):
        cond = np.tile(np.array([[-5.0, 0, 0]]), (20, 1))
        fossa = np.tile(np.array([[5.0, 0, 0]]), (20, 1))
        w_cond, w_fossa = tmj_weights(np.zeros(3), cond, fossa, q=0.5)
        assert w_cond == pytest.approx(0.5, abs=1e-15)
        assert w_cond + w_fossa == 1.0

    def test_coincident_with_condyle_cluster(self):
        cond = np.tile(np.array([[0.0, 0, 0]]), (20, 1))
        fossa = np.tile(np.array([[4.0, 0, 0]]), (20, 1))
        w_cond, _ = tmj_weights(np.zeros(3), cond, fossa, q=1.0, eps=1e-8)
        assert w_cond == pytest.approx(1.0, abs=1e-6)

    def test_hand_evaluated_decay_cases(self):
        # d_cond = 1, d_fossa = 4, eps = 0: q=0.5 -> 2/3, q=1.0 -> 4/5
        cond = np.tile(np.array([[1.0, 0, 0]]), (20, 1))
        fossa = np.tile(np.array([[4.0, 0, 0]]), (20, 1))
        x = np.zeros(3)
        w_disc, _ = tmj_weights(x, cond, fossa, q=0.5, eps=0.0)
        w_caps, _ = tmj_weights(x, cond, fossa, q=1.0, eps=0.0)
        assert w_disc == pytest.approx(2.0 / 3.0, abs=1e-12)
        assert w_caps == pytest.approx(4.0 / 5.0, abs=1e-12)

    def test_weights_in_unit_interval(self, rng):
        cond = blob(rng, n=40)
        fossa = blob(rng, n=40) + 8.0
        for _ in range(20):
            w_c, w_f = tmj_weights(rng.normal(size=3) * 10, cond, fossa, q=0.7, k_nn=20)
            assert 0.0 <= w_c <= 1.0
            assert w_c + w_f == 1.0

    def test_blend_applies_weighted_displacements(self, rng):
        controls = blob(rng, n=30)
        f_cond = DeformationField(controls, np.tile([1.0, 0, 0], (30, 1)) * 0.1, beta=50.0)
        f_fossa = DeformationField(controls, np.tile([0, 1.0, 0], (30, 1)) * 0.1, beta=50.0)
        cond_refs = np.tile(np.array([[1.0, 0, 0]]), (20, 1))
        fossa_refs = np.tile(np.array([[4.0, 0, 0]]), (20, 1))
        x = np.zeros(3)
        out = tmj_blend(x, f_cond, f_fossa, cond_refs, fossa_refs, q=1.0, eps=0.0)
        d_c = apply_field(f_cond, x) - x
        d_f = apply_field(f_fossa, x) - x
        np.testing.assert_allclose(out, x + 0.8 * d_c + 0.2 * d_f, atol=1e-12)

    def test_small_reference_cloud_rejected(self):
        small = np.zeros((5, 3))
        with pytest.raises(RegistrationError):
            tmj_weights(np.zeros(3), small, small, q=0.5, k_nn=20)


class TestSimilarityFit:
    def test_recovers_known_transform(self, rng):
        src = blob(rng, n=30)
        r0 = random_rotation(rng)
        s0 = 1.37
        t0 = rng.uniform(-10, 10, 3)
        dst = s0 * src @ r0.T + t0
        scale, rot, trans = similarity_fit(src, dst)
        assert scale == pytest.approx(s0, rel=1e-9)
        np.testing.assert_allclose(rot, r0, atol=1e-9)
        np.testing.assert_allclose(trans, t0, atol=1e-7)


class TestExtractScs:
    def plane(self):
        return Plane(np.zeros(3), [0, 0, 1.0], [1.0, 0, 0], [0, 1.0, 0])

    def test_sphere_peaks_at_reference(self):
        mesh = icosphere(radius=12.0, subdivisions=3)
        result = extract_scs(mesh, self.plane())
        assert result.offset_mm == 0.0
        assert len(result.areas) == 11
        assert result.area_cm2 == pytest.approx(np.pi * 144.0 / 100.0, rel=0.02)

    def test_off_center_reference_finds_equator(self):
        mesh = icosphere(radius=12.0, subdivisions=3, center=(0, 0, -3.0))
        result = extract_scs(mesh, self.plane())
        assert result.offset_mm == -3.0

    def test_ellipsoid_against_analytic_sections(self):
        mesh = icosphere(radius=1.0, subdivisions=4)
        stretched = mesh.vertices * np.array([8.0, 6.0, 10.0])
        from reconplan.geometry import TriMesh

        ellipsoid = TriMesh(stretched, mesh.faces)
        result = extract_scs(ellipsoid, self.plane(), offsets=[-4.0, -2.0, 0.0, 2.0, 4.0])
        for off, area in result.areas.items():
            frac = 1.0 - (off / 10.0) ** 2
            expected = np.pi * 8.0 * 6.0 * frac / 100.0
            assert area == pytest.approx(expected, rel=0.02)
        assert result.offset_mm == 0.0
