import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_rotation
from xraysplat.errors import BehindCamera, InvalidConfig, NonPSD
from xraysplat.geometry import (
    COV2D_FLOOR,
    CameraView,
    DetectorParams,
    Trajectory,
    backproject,
    load_geometry,
    make_circular_trajectory,
    pixel_ray,
    project_covariance,
    project_point,
    projection_jacobian,
    save_geometry,
)


def _random_view(rng, width=64, height=48) -> CameraView:
    R = random_rotation(rng)
    f = rng.uniform(200, 2000)
    K = np.array([[f, rng.uniform(-2, 2), rng.uniform(10, 50)], [0, f * rng.uniform(0.9, 1.1), rng.uniform(10, 40)],
                  [0, 0, 1.0]])
    # put the world origin a few hundred mm in front of the camera
    t = np.array([rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(300, 700)])
    return CameraView(0, K, R, t, width, height, rng.uniform(0, 1))


def _numeric_jacobian(mu, view, h=1e-4):
    J = np.zeros((2, 3))
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        J[:, k] = (project_point(mu + e, view)[0] - project_point(mu - e, view)[0]) / (2 * h)
    return J


def _random_spd(rng, scale=3.0):
    A = rng.normal(size=(3, 3)) * scale
    return A @ A.T + 0.1 * np.eye(3)


class TestCameraView:
    def test_rejects_improper_rotation(self):
        with pytest.raises(InvalidConfig):
            CameraView(0, np.eye(3), np.diag([1.0, 1.0, -1.0]), np.zeros(3), 8, 8)

    def test_rejects_non_orthonormal(self):
        with pytest.raises(InvalidConfig):
            CameraView(0, np.eye(3), np.diag([1.0, 1.0, 1.001]), np.zeros(3), 8, 8)

    def test_rejects_lower_triangular_intrinsics(self):
        K = np.eye(3)
        K[1, 0] = 0.5
        with pytest.raises(InvalidConfig):
            CameraView(0, K, np.eye(3), np.zeros(3), 8, 8)

    @pytest.mark.parametrize("ts", [-0.01, 1.01])
    def test_rejects_timestamp_outside_unit_interval(self, ts):
        with pytest.raises(InvalidConfig):
            CameraView(0, np.eye(3), np.eye(3), np.zeros(3), 8, 8, ts)

    def test_projection_matrix(self, rng):
        v = _random_view(rng)
        np.testing.assert_array_equal(v.P, v.K @ np.hstack([v.R, v.t_vec[:, None]]))
        np.testing.assert_allclose(v.R @ v.center + v.t_vec, 0.0, atol=1e-12)

    def test_lowres_scales_first_two_rows(self, rng):
        v = _random_view(rng, 64, 48)
        lr = v.lowres(4)
        assert (lr.width_hr, lr.height_hr) == (16, 12)
        np.testing.assert_allclose(lr.K[:2], v.K[:2] / 4)
        np.testing.assert_array_equal(lr.K[2], v.K[2])

    def test_lowres_requires_divisible_dims(self, rng):
        with pytest.raises(InvalidConfig):
            _random_view(rng, 30, 48).lowres(4)

    @given(st.integers(0, 15), st.integers(0, 11), st.integers(0, 2**31 - 1))
    def test_lr_pixel_centre_is_mean_of_hr_block_centres(self, x, y, seed):
        # with half-integer pixel centres the 4x4 HR block of an LR pixel projects from the same rays
        v = _random_view(np.random.default_rng(seed), 64, 48)
        lr = v.lowres(4)
        hr_centres = [(4 * x + i + 0.5, 4 * y + j + 0.5) for i in range(4) for j in range(4)]
        mean_hr = np.mean(hr_centres, axis=0)
        o, d_hr = pixel_ray(v, mean_hr)
        _, d_lr = pixel_ray(lr, (x + 0.5, y + 0.5))
        np.testing.assert_allclose(d_hr, d_lr, atol=1e-12)


class TestProjectPoint:
    def test_on_axis_point_hits_principal_point(self):
        K = np.array([[800.0, 0, 31.5], [0, 800.0, 17.25], [0, 0, 1]])
        v = CameraView(0, K, np.eye(3), np.zeros(3), 64, 48)
        uv, depth = project_point([0.0, 0.0, 123.0], v)
        np.testing.assert_allclose(uv, [31.5, 17.25], rtol=0, atol=1e-12)
        assert depth == 123.0

    def test_matches_homogeneous_matrix_product(self, rng):
        for _ in range(100):
            v = _random_view(rng)
            mu = rng.uniform(-50, 50, size=3)
            ph = v.P @ np.append(mu, 1.0)
            uv, depth = project_point(mu, v)
            np.testing.assert_allclose(uv, ph[:2] / ph[2], rtol=1e-9)
            assert math.isclose(depth, ph[2] / v.K[2, 2], rel_tol=1e-9)

    def test_zero_depth_is_behind_camera(self):
        v = CameraView(0, np.eye(3), np.eye(3), np.zeros(3), 8, 8)
        with pytest.raises(BehindCamera):
            project_point([1.0, 2.0, 0.0], v)
        with pytest.raises(BehindCamera):
            project_point([1.0, 2.0, -5.0], v)

    @given(st.floats(0.0, 63.99), st.floats(0.0, 47.99), st.floats(50.0, 2000.0), st.integers(0, 2**31 - 1))
    def test_backprojection_round_trip(self, u, v_, depth, seed):
        view = _random_view(np.random.default_rng(seed))
        X = backproject(view, (u, v_), depth)
        uv, d = project_point(X, view)
        np.testing.assert_allclose(uv, [u, v_], atol=1e-6)
        assert math.isclose(d, depth, rel_tol=1e-9)

    def test_pixel_ray_passes_through_backprojected_points(self, rng):
        view = _random_view(rng)
        o, d = pixel_ray(view, (10.5, 20.5))
        X = backproject(view, (10.5, 20.5), 400.0)
        w = X - o
        np.testing.assert_allclose(np.cross(w / np.linalg.norm(w), d), 0.0, atol=1e-12)
        assert np.dot(w, d) > 0


class TestProjectCovariance:
    def test_jacobian_matches_finite_differences(self, rng):
        for _ in range(20):
            v = _random_view(rng)
            mu = rng.uniform(-30, 30, size=3)
            xc = v.R @ mu + v.t_vec
            np.testing.assert_allclose(projection_jacobian(xc, v.K) @ v.R, _numeric_jacobian(mu, v),
                                       rtol=1e-6, atol=1e-9)

    def test_matches_numerical_jacobian_oracle(self, rng):
        for _ in range(20):
            v = _random_view(rng)
            mu = rng.uniform(-30, 30, size=3)
            S = _random_spd(rng)
            J = _numeric_jacobian(mu, v)
            expected = J @ S @ J.T + COV2D_FLOOR * np.eye(2)
            np.testing.assert_allclose(project_covariance(S, mu, v), expected, rtol=1e-6)

    def test_far_field_isotropic(self):
        f, sigma, z = 1000.0, 0.5, 100.0
        K = np.array([[f, 0, 16], [0, f, 16], [0, 0, 1]])
        v = CameraView(0, K, np.eye(3), np.zeros(3), 32, 32)
        S2 = project_covariance(sigma**2 * np.eye(3), [0.0, 0.0, z], v, floor=0.0)
        np.testing.assert_allclose(S2, (f / z) ** 2 * sigma**2 * np.eye(2), rtol=1e-2)

    def test_frozen_value(self):
        K = np.array([[500.0, 0, 10], [0, 400.0, 12], [0, 0, 1]])
        v = CameraView(0, K, np.eye(3), np.zeros(3), 20, 24)
        S = np.array([[4.0, 1.0, 0.5], [1.0, 2.0, 0.25], [0.5, 0.25, 9.0]])
        S2 = project_covariance(S, [2.0, -1.0, 250.0], v)
        # J S J^T + floor with J from central differences of project_point (h = 1e-4)
        expected = np.array([[16.070304, 3.1990784], [3.1990784, 5.22548864]])
        np.testing.assert_allclose(S2, expected, rtol=1e-7)

    def test_symmetric_exactly(self, rng):
        for _ in range(50):
            v = _random_view(rng)
            S2 = project_covariance(_random_spd(rng), rng.uniform(-30, 30, 3), v)
            assert S2[0, 1] == S2[1, 0]

    def test_eigenvalues_floored(self, rng):
        for _ in range(50):
            v = _random_view(rng)
            S = _random_spd(rng, scale=rng.uniform(1e-4, 3))
            assert np.linalg.eigvalsh(project_covariance(S, rng.uniform(-30, 30, 3), v)).min() >= COV2D_FLOOR - 1e-12

    def test_world_rotation_equivariance(self, rng):
        for _ in range(20):
            v = _random_view(rng)
            Q = random_rotation(rng)
            mu = rng.uniform(-30, 30, 3)
            S = _random_spd(rng)
            # rotate the world by Q and absorb Q^T into the camera rotation
            v_rot = CameraView(0, v.K, v.R @ Q.T, v.t_vec, v.width_hr, v.height_hr)
            np.testing.assert_allclose(project_covariance(Q @ S @ Q.T, Q @ mu, v_rot), project_covariance(S, mu, v),
                                       rtol=1e-9, atol=1e-12)

    def test_non_psd_rejected(self):
        v = CameraView(0, np.eye(3), np.eye(3), np.zeros(3), 8, 8)
        with pytest.raises(NonPSD):
            project_covariance(np.diag([1.0, -0.1, 1.0]), [0, 0, 5.0], v)
        with pytest.raises(NonPSD):
            project_covariance(np.array([[1.0, 0.5, 0], [0.0, 1, 0], [0, 0, 1]]), [0, 0, 5.0], v)

    def test_behind_camera(self):
        v = CameraView(0, np.eye(3), np.eye(3), np.zeros(3), 8, 8)
        with pytest.raises(BehindCamera):
            project_covariance(np.eye(3), [0, 0, -1.0], v)


class TestTrajectory:
    def test_thirty_view_sweep(self):
        tr = make_circular_trajectory(30, 180.0)
        assert len(tr) == 30
        for k, v in enumerate(tr):
            assert v.timestamp == k / 29
        assert tr.angles_deg[0] == 0.0 and math.isclose(tr.angles_deg[-1], 180.0)

    def test_two_opposed_views(self):
        tr = make_circular_trajectory(2, 180.0, source_distance=400.0)
        c0, c1 = tr[0].center, tr[1].center
        np.testing.assert_allclose(c0, -c1, atol=1e-9)
        assert [v.timestamp for v in tr] == [0.0, 1.0]

    def test_full_circle_drops_duplicate_endpoint(self):
        tr = make_circular_trajectory(4, 360.0)
        np.testing.assert_allclose(tr.angles_deg, [0, 90, 180, 270])

    def test_static_timestamps(self):
        assert {v.timestamp for v in make_circular_trajectory(5, 90.0, time_mode="static")} == {0.0}

    def test_rotations_orthonormal_and_look_at_origin(self):
        det = DetectorParams(64, 48)
        for v in make_circular_trajectory(17, 200.0, 650.0, det):
            assert np.abs(v.R.T @ v.R - np.eye(3)).max() < 1e-12
            assert math.isclose(np.linalg.det(v.R), 1.0, rel_tol=1e-12)
            assert math.isclose(np.linalg.norm(v.center), 650.0, rel_tol=1e-12)
            uv, depth = project_point([0.0, 0.0, 0.0], v)
            np.testing.assert_allclose(uv, [32.0, 24.0], atol=1e-9)
            assert math.isclose(depth, 650.0, rel_tol=1e-12)

    @pytest.mark.parametrize("kwargs", [dict(n_views=1, span_degrees=90.0), dict(n_views=4, span_degrees=0.0),
                                        dict(n_views=4, span_degrees=361.0),
                                        dict(n_views=4, span_degrees=90.0, time_mode="random")])
    def test_invalid(self, kwargs):
        with pytest.raises(InvalidConfig):
            make_circular_trajectory(**kwargs)

    def test_non_monotone_timestamps_rejected(self):
        a = CameraView(0, np.eye(3), np.eye(3), np.zeros(3), 8, 8, 0.5)
        b = CameraView(1, np.eye(3), np.eye(3), np.zeros(3), 8, 8, 0.2)
        with pytest.raises(InvalidConfig):
            Trajectory([a, b], 500.0, 1000.0)


def test_geometry_file_round_trip_is_exact(tmp_path, rng):
    views = [_random_view(rng) for _ in range(5)]
    save_geometry(tmp_path / "g.json", views)
    back = load_geometry(tmp_path / "g.json")
    for a, b in zip(views, back):
        np.testing.assert_array_equal(a.K, b.K)
        np.testing.assert_array_equal(a.R, b.R)
        np.testing.assert_array_equal(a.t_vec, b.t_vec)
        assert (a.view_id, a.width_hr, a.height_hr, a.timestamp) == (b.view_id, b.width_hr, b.height_hr, b.timestamp)
    save_geometry(tmp_path / "h.json", back)
    assert (tmp_path / "g.json").read_bytes() == (tmp_path / "h.json").read_bytes()
