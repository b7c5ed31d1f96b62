import math

import numpy as np
import pytest

from fidslam.camera import tag_object_corners, undistort_points
from fidslam.errors import DegenerateConfiguration, NoValidPose
from fidslam.planar import (AmbiguousPose, ambiguity_check, homography_from_4pts, is_unambiguous,
                            pose_candidates_from_homography, view_angle)
from fidslam.scene import Settings
from fidslam.se3 import Pose, rot_z

from .conftest import pose_close
from .oracles import K, gate_agreement, render, rot_dist, tag_in_camera

SQUARE = np.array([(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)])


def apply_h(H, pts):
    p = np.c_[pts, np.ones(len(pts))] @ H.T
    return p[:, :2] / p[:, 2:]


# ---------------------------------------------------------------- homography


def test_identity_homography():
    assert np.allclose(homography_from_4pts(SQUARE, SQUARE), np.eye(3), atol=1e-12)


def test_scale_two_homography():
    assert np.allclose(homography_from_4pts(SQUARE, 2 * SQUARE), np.diag([2.0, 2.0, 1.0]), atol=1e-12)


def test_homography_matches_plane_projection(rng):
    for _ in range(50):
        T = tag_in_camera(rng.uniform(30, 90), rng.uniform(0.5, 3), yaw=rng.uniform(-3, 3))
        obj = tag_object_corners(0.2)
        img = undistort_points(K, render(T, 0.2))
        H = homography_from_4pts(obj, img)
        # every other plane point must land where the pinhole puts it
        extra = rng.uniform(-0.3, 0.3, size=(20, 2))
        X = np.c_[extra, np.zeros(20)] @ T.R.T + T.t
        assert np.max(np.abs(apply_h(H, extra) - X[:, :2] / X[:, 2:])) < 1e-10


@pytest.mark.parametrize("pts", [
    [(0, 0), (1, 1), (2, 2), (0, 1)],
    [(0, 0), (0, 0), (1, 0), (0, 1)],
])
def test_degenerate_points_raise(pts):
    with pytest.raises(DegenerateConfiguration):
        homography_from_4pts(np.array(pts, dtype=float), SQUARE)
    with pytest.raises(DegenerateConfiguration):
        homography_from_4pts(SQUARE, np.array(pts, dtype=float))


# ---------------------------------------------------------------- candidates


def test_identity_homography_gives_unit_distance():
    for p in pose_candidates_from_homography(np.eye(3)):
        assert np.allclose(p.t, [0, 0, 1], atol=1e-12)
    assert pose_close(pose_candidates_from_homography(np.eye(3))[0], Pose(None, [0, 0, 1]), 1e-12)


def test_head_on_candidates_and_refinement():
    T = tag_in_camera(90, 2.0, offset=(0.0, 0.0))
    uv = render(T, 0.2)
    H = homography_from_4pts(tag_object_corners(0.2), undistort_points(K, uv))
    for c in pose_candidates_from_homography(H):
        assert rot_dist(c, T) < 1e-6 and np.linalg.norm(c.t - T.t) < 1e-6
    a = ambiguity_check(uv, K, 0.2)
    assert pose_close(a.best, T, 1e-6)


def test_tilted_candidates_are_mirror_images():
    T = tag_in_camera(45, 2.0)
    uv = render(T, 0.2)
    H = homography_from_4pts(tag_object_corners(0.2), undistort_points(K, uv))
    c1, c2 = pose_candidates_from_homography(H)
    # same elevation, different normals
    assert abs(view_angle(c1) - view_angle(c2)) < 1e-9
    assert rot_dist(c1, c2) > math.radians(30)
    for c in (c1, c2):
        assert np.allclose(c.R.T @ c.R, np.eye(3), atol=1e-12)
        assert c.t[2] > 0
    a = ambiguity_check(uv, K, 0.2)
    assert pose_close(a.best, T, 1e-6)
    assert rot_dist(a.alternate, T) > math.radians(30)


# ---------------------------------------------------------------- ambiguity check


def test_zero_noise_ratio_is_zero():
    for elev in (90, 60, 30, 15):
        a = ambiguity_check(render(tag_in_camera(elev, 1.5), 0.2), K, 0.2)
        assert a.err_best < 1e-8
        assert a.ratio < 1e-6
        assert a.err_best <= a.err_alt


def test_view_angle_seventy_degrees():
    a = ambiguity_check(render(tag_in_camera(70, 1.5), 0.2), K, 0.2)
    assert abs(a.view_angle - 70.0) < 1.0


def test_view_angle_roll_invariant(rng):
    for _ in range(50):
        T = tag_in_camera(rng.uniform(5, 90), rng.uniform(0.5, 4), yaw=rng.uniform(-3, 3))
        roll = rot_z(rng.uniform(-math.pi, math.pi))
        rolled = Pose.from_rt(roll @ T.R, roll @ T.t)
        assert abs(view_angle(rolled) - view_angle(T)) < 1e-9


def test_error_ordering_under_noise(rng):
    for _ in range(50):
        T = tag_in_camera(rng.uniform(20, 90), rng.uniform(1, 3))
        a = ambiguity_check(render(T, 0.2, 1.0, rng), K, 0.2)
        assert a.err_best <= a.err_alt and 0.0 <= a.ratio <= 1.0
        for p in (a.best, a.alternate):
            if p is not None:
                assert np.all((tag_object_corners(0.2) @ p.R.T + p.t)[:, 2] > 0)


def test_zero_noise_random_views(rng):
    n = 0
    while n < 1000:
        size = rng.uniform(0.1, 0.3)
        T = tag_in_camera(rng.uniform(20, 90), rng.uniform(0.5, 4), yaw=rng.uniform(-math.pi, math.pi),
                          offset=rng.uniform(-0.2, 0.2, 2))
        uv = render(T, size)
        if not (np.all(uv > 0) and np.all(uv[:, 0] < K.width) and np.all(uv[:, 1] < K.height)):
            continue
        n += 1
        a = ambiguity_check(uv, K, size)
        assert a.ratio < 1e-6
        assert rot_dist(a.best, T) < 1e-6 and np.linalg.norm(a.best.t - T.t) < 1e-6


# ---------------------------------------------------------------- gate


def fake(ratio, angle):
    return AmbiguousPose(Pose(), None, 0.0, 1.0, ratio, angle)


@pytest.mark.parametrize("rule", ["decisive", "literal"])
def test_gate_zero_ratio_admitted(rule):
    assert is_unambiguous(fake(0.0, 10.0), Settings(ambiguity_rule=rule))


@pytest.mark.parametrize("rule", ["decisive", "literal"])
def test_gate_steep_view_always_admitted(rule):
    assert is_unambiguous(fake(1.0, 75.0), Settings(ambiguity_rule=rule))


def test_gate_near_ambiguous_shallow_view_rejected():
    assert not is_unambiguous(fake(0.99, 10.0), Settings())


def test_gate_rendered_shallow_view_rejected():
    T = tag_in_camera(10, 3.0)
    for s in range(300):
        try:
            a = ambiguity_check(render(T, 0.08, 1.0, np.random.default_rng(s)), K, 0.08)
        except NoValidPose:
            continue
        if a.ratio >= 0.95 and a.view_angle < 60:
            break
    else:
        pytest.fail("no near-ambiguous draw found")
    assert not is_unambiguous(a, Settings())
    assert not is_unambiguous(a, Settings(ambiguity_rule="literal"))


def test_gate_thresholds_at_boundaries():
    s = Settings()
    assert s.ambiguity_ratio_threshold == 0.3 and s.max_ambiguous_view_angle == 60
    lit = Settings(ambiguity_rule="literal")
    assert is_unambiguous(fake(0.3, 30), lit) and not is_unambiguous(fake(0.31, 30), lit)
    assert is_unambiguous(fake(0.5, 60), s)
    assert not is_unambiguous(fake(0.5, 59.9), s)


def test_gate_matches_oracle_head_on_large_tag():
    agreement, admit_rate, oracle = gate_agreement(tag_in_camera(90, 1.0), 0.3, Settings())
    assert oracle
    assert agreement >= 0.95 and admit_rate >= 0.99
