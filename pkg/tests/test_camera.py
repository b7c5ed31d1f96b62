import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fidslam.camera import Intrinsics, pixel_area, project, project_batch, tag_object_corners, undistort_points
from fidslam.errors import NonPositiveSize, PointBehindCamera, ValidationError

K = Intrinsics(600.0, 600.0, 320.0, 240.0, width=640, height=480)


def scalar_distorted_pixel(k, X):
    # written out longhand from the radial-tangential model, one scalar at a time
    x, y = X[0] / X[2], X[1] / X[2]
    k1, k2, p1, p2 = k.dist
    r2 = x * x + y * y
    rad = 1 + k1 * r2 + k2 * r2 ** 2
    xd = x * rad + 2 * p1 * x * y + p2 * (r2 + 2 * x * x)
    yd = y * rad + p1 * (r2 + 2 * y * y) + 2 * p2 * x * y
    return np.array([k.fx * xd + k.cx, k.fy * yd + k.cy])


def test_optical_axis_maps_to_principal_point():
    assert np.array_equal(project(K, [0, 0, 2]), [320, 240])


def test_offset_point():
    assert np.allclose(project(K, [1, 0, 2]), [620, 240], atol=1e-12)


def test_radial_distortion_matches_scalar_oracle():
    k = Intrinsics(600.0, 600.0, 320.0, 240.0, (0.1, 0.0, 0.0, 0.0), 640, 480)
    # x' = 0.5, r2 = 0.25, radial = 1.025
    assert np.allclose(project(k, [1, 0, 2]), [600 * 0.5 * 1.025 + 320, 240], atol=1e-12)
    k = Intrinsics(500.0, 510.0, 300.0, 200.0, (-0.2, 0.05, 1e-3, -2e-3), 640, 480)
    for X in ([0.3, -0.2, 1.5], [-0.4, 0.3, 2.0], [0.01, 0.02, 0.7]):
        assert np.allclose(project(k, X), scalar_distorted_pixel(k, np.array(X)), atol=1e-10)


def test_behind_camera_raises():
    with pytest.raises(PointBehindCamera):
        project(K, [0, 0, -1])
    with pytest.raises(PointBehindCamera):
        project(K, [1, 1, 0])


def test_projection_jacobian_matches_finite_differences(rng):
    k = Intrinsics(500.0, 510.0, 300.0, 200.0, (-0.2, 0.05, 1e-3, -2e-3), 640, 480)
    for _ in range(50):
        X = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(0.8, 3.0)])
        _, J = project_batch(k.as_array(), X)
        num = np.empty((2, 3))
        for i in range(3):
            e = np.zeros(3)
            e[i] = 1e-6
            num[:, i] = (project(k, X + e) - project(k, X - e)) / 2e-6
        assert np.max(np.abs(J - num)) <= 1e-5 * max(1.0, np.max(np.abs(num)))


def test_backprojection_recovers_ray(rng):
    for _ in range(100):
        X = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.5, 5)])
        ray = np.append(undistort_points(K, project(K, X)), 1.0)
        assert np.allclose(ray / np.linalg.norm(ray), X / np.linalg.norm(X), atol=1e-9)


def test_undistort_inverts_distortion(rng):
    k = Intrinsics(500.0, 510.0, 300.0, 200.0, (-0.2, 0.05, 1e-3, -2e-3), 640, 480)
    X = np.array([0.2, -0.1, 1.0])
    assert np.allclose(undistort_points(k, project(k, X)), X[:2], atol=1e-12)


def test_tag_corners_published_example():
    c = tag_object_corners(0.16)
    assert np.allclose(c, [(-0.08, -0.08, 0), (0.08, -0.08, 0), (0.08, 0.08, 0), (-0.08, 0.08, 0)], atol=0)


def test_tag_corners_unit_two():
    assert np.array_equal(np.abs(tag_object_corners(2.0)[:, :2]), np.ones((4, 2)))


@given(st.floats(1e-3, 10.0))
def test_tag_corners_ccw_with_area(l):
    c = tag_object_corners(l)[:, :2]
    signed = 0.5 * sum(c[i, 0] * c[(i + 1) % 4, 1] - c[(i + 1) % 4, 0] * c[i, 1] for i in range(4))
    assert signed > 0
    assert math.isclose(signed, l * l, rel_tol=1e-12)


@pytest.mark.parametrize("l", [0.0, -0.1])
def test_tag_corners_reject_nonpositive(l):
    with pytest.raises(NonPositiveSize):
        tag_object_corners(l)


def test_pixel_area_unit_square_and_degenerate():
    assert pixel_area([(0, 0), (1, 0), (1, 1), (0, 1)]) == 1.0
    assert pixel_area([(0, 0), (1, 1), (2, 2), (3, 3)]) == 0.0


def test_pixel_area_matches_triangulation(rng):
    for _ in range(200):
        # convex quad: four points on an ellipse in angular order
        ang = np.sort(rng.uniform(0, 2 * math.pi, 4))
        a, b = rng.uniform(5, 50, 2)
        q = np.column_stack([a * np.cos(ang), b * np.sin(ang)]) + rng.uniform(0, 500, 2)

        def tri(a, b, c):
            return 0.5 * abs((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))

        ref = tri(q[0], q[1], q[2]) + tri(q[0], q[2], q[3])
        assert abs(pixel_area(q) - ref) < 1e-12 * max(1.0, ref)


def test_intrinsics_validation():
    with pytest.raises(ValidationError):
        Intrinsics(0.0, 600.0, 320.0, 240.0)
    with pytest.raises(ValidationError):
        Intrinsics(600.0, 600.0, 700.0, 240.0, width=640)
    with pytest.raises(ValidationError):
        Intrinsics(600.0, 600.0, 320.0, 240.0, dist=(0.1,))
