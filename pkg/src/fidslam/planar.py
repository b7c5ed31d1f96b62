"""
Pose of a single square tag from its four corners, and the two-fold
ambiguity test used to gate tag initialization.

A planar target seen under weak perspective admits two poses whose normals are
mirror images about the line of sight; only perspective distortion tells them
apart. Both candidates are refined on reprojection error, and the ratio
``err_best / err_alt`` says how decisive the choice is (0 = decisive, 1 = the
two poses explain the corners equally well).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .camera import MIN_DEPTH, Intrinsics, project_batch, tag_object_corners, undistort_points
from .errors import DegenerateConfiguration, NoValidPose
from .se3 import Pose, exp_so3, skew


@dataclass(frozen=True)
class AmbiguousPose:
    best: Pose  # tag in camera
    alternate: Pose | None
    err_best: float  # RMS corner error, pixels
    err_alt: float
    ratio: float
    view_angle: float  # degrees between line of sight and tag plane; 90 = head-on


def _collinear(pts: np.ndarray, tol: float) -> bool:
    for i in range(4):
        a, b, c = (pts[j] for j in range(4) if j != i)
        area = 0.5 * abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
        if area <= tol:
            return True
    return False


def _normalizer(pts: np.ndarray) -> np.ndarray:
    c = pts.mean(axis=0)
    d = np.mean(np.linalg.norm(pts - c, axis=1))
    s = math.sqrt(2.0) / d
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def homography_from_4pts(obj, img) -> np.ndarray:
    """Normalized DLT homography mapping tag-plane points onto image points."""
    obj = np.asarray(obj, dtype=float)[:, :2]
    img = np.asarray(img, dtype=float)[:, :2]
    if not (np.all(np.isfinite(obj)) and np.all(np.isfinite(img))):
        raise DegenerateConfiguration("non-finite points")
    for pts in (obj, img):
        scale = max(np.ptp(pts[:, 0]), np.ptp(pts[:, 1]), 1e-300)
        if _collinear(pts, 1e-12 * scale * scale):
            raise DegenerateConfiguration("three or more points are collinear or coincident")
    To, Ti = _normalizer(obj), _normalizer(img)
    o = (To @ np.c_[obj, np.ones(4)].T).T
    p = (Ti @ np.c_[img, np.ones(4)].T).T
    A = np.zeros((8, 9))
    for i in range(4):
        X, Y, _ = o[i]
        u, v, _ = p[i]
        A[2 * i] = [-X, -Y, -1, 0, 0, 0, u * X, u * Y, u]
        A[2 * i + 1] = [0, 0, 0, -X, -Y, -1, v * X, v * Y, v]
    _, _, Vt = np.linalg.svd(A)
    Hn = Vt[-1].reshape(3, 3)
    H = np.linalg.inv(Ti) @ Hn @ To
    if abs(H[2, 2]) > 1e-12:
        H = H / H[2, 2]
    return H


def _nearest_rotation(M: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def pose_candidates_from_homography(H) -> tuple[Pose, Pose]:
    """Two tag-in-camera poses consistent with a plane-to-normalized-image H.

    The first comes straight from ``H ~ [r1 r2 t]``; the second mirrors the
    tag normal about the line of sight to the tag center, which leaves the
    orthographic image unchanged.
    """
    H = np.asarray(H, dtype=float)
    h1, h2, h3 = H[:, 0], H[:, 1], H[:, 2]
    lam = 2.0 / (np.linalg.norm(h1) + np.linalg.norm(h2))
    if h3[2] * lam < 0.0:
        lam = -lam
    t = lam * h3
    if t[2] <= MIN_DEPTH:
        raise NoValidPose("tag center is not in front of the camera")
    r1, r2 = lam * h1, lam * h2
    R = _nearest_rotation(np.column_stack([r1, r2, np.cross(r1, r2)]))
    v = t / np.linalg.norm(t)
    mirror = np.eye(3) - 2.0 * np.outer(v, v)
    R_alt = mirror @ R @ np.diag([1.0, 1.0, -1.0])
    return Pose.from_rt(R, t), Pose.from_rt(R_alt, t)


def refine_pose(pose: Pose, obj: np.ndarray, uv: np.ndarray, k: Intrinsics,
                iterations: int = 50) -> tuple[Pose, float]:
    """LM on the 8 corner residuals. Returns the pose and RMS error in pixels.

    The error is ``inf`` when the pose puts a corner behind the camera.
    """
    params = k.as_array()
    R, t = pose.R.copy(), pose.t.copy()

    def residual(R, t, jac):
        X = obj @ R.T + t
        if np.any(X[:, 2] <= MIN_DEPTH):
            return None, None
        pix, P = project_batch(params, X, jacobian=jac)
        r = (pix - uv).ravel()
        if not jac:
            return r, None
        D = np.empty((4, 3, 6))
        D[:, :, :3] = -R @ skew(obj)
        D[:, :, 3:] = R
        return r, np.einsum("kab,kbl->kal", P, D).reshape(8, 6)

    r, J = residual(R, t, True)
    if r is None:
        return pose, math.inf
    cost = float(r @ r)
    lam = 1e-3
    for _ in range(iterations):
        if cost < 1e-28:
            break
        H = J.T @ J
        g = J.T @ r
        improved = False
        while lam < 1e8:
            A = H + lam * np.diag(np.diag(H) + 1e-12)
            try:
                dx = np.linalg.solve(A, -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            Rn = R @ exp_so3(dx[:3])
            tn = t + R @ dx[3:]
            rn, _ = residual(Rn, tn, False)
            if rn is not None and float(rn @ rn) < cost:
                improved = True
                break
            lam *= 10.0
        if not improved:
            break
        prev = cost
        R, t = Rn, tn
        r, J = residual(R, t, True)
        cost = float(r @ r)
        lam = max(lam / 10.0, 1e-12)
        if prev - cost < 1e-14 * prev:
            break
    return Pose.from_rt(R, t), math.sqrt(cost / 4.0)


def view_angle(pose: Pose) -> float:
    """Elevation of the line of sight above the tag plane, in degrees."""
    v = pose.t / np.linalg.norm(pose.t)
    n = pose.R[:, 2]
    return math.degrees(math.asin(min(1.0, abs(float(n @ v)))))


def ambiguity_check(corners, k: Intrinsics, tag_size: float) -> AmbiguousPose:
    """Refine both planar candidates and rank them by reprojection error."""
    uv = np.asarray(corners, dtype=float).reshape(4, 2)
    obj = tag_object_corners(tag_size)
    img = undistort_points(k, uv)
    H = homography_from_4pts(obj[:, :2], img)
    cands = pose_candidates_from_homography(H)
    refined = sorted((refine_pose(c, obj, uv, k) for c in cands), key=lambda pe: pe[1])
    (best, eb), (alt, ea) = refined
    if not math.isfinite(eb):
        raise NoValidPose("no candidate keeps all corners in front of the camera")
    if not math.isfinite(ea):
        alt = None
    if ea > 1e-12:
        ratio = eb / ea
    else:
        ratio = 0.0 if eb <= 1e-12 else 1.0
    return AmbiguousPose(best, alt, eb, ea, min(ratio, 1.0), view_angle(best))


def is_unambiguous(a: AmbiguousPose, settings) -> bool:
    """Gate for initializing a tag pose from a single observation.

    Views steeper than ``max_ambiguous_view_angle`` are always admitted.
    Otherwise the ``literal`` rule admits ``ratio <= ambiguity_ratio_threshold``
    and the ``decisive`` rule admits ``ratio < 1 - ambiguity_margin``.
    """
    if a.view_angle >= settings.max_ambiguous_view_angle:
        return True
    if settings.ambiguity_rule == "literal":
        return a.ratio <= settings.ambiguity_ratio_threshold
    return a.ratio < 1.0 - settings.ambiguity_margin
