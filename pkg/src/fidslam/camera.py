"""Pinhole camera with radial-tangential distortion, plus tag corner geometry."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonPositiveSize, PointBehindCamera, ValidationError

MIN_DEPTH = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    dist: tuple = (0.0, 0.0, 0.0, 0.0)
    width: int = 640
    height: int = 480

    def __post_init__(self):
        object.__setattr__(self, "dist", tuple(float(d) for d in self.dist))
        if len(self.dist) != 4:
            raise ValidationError("dist must hold [k1, k2, p1, p2]", "intrinsics.dist")
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError("focal lengths must be positive", "intrinsics")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError("principal point outside the sensor", "intrinsics")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def as_array(self) -> np.ndarray:
        """``[fx, fy, cx, cy, k1, k2, p1, p2]``"""
        return np.array([self.fx, self.fy, self.cx, self.cy, *self.dist])


def distort(x, y, k1, k2, p1, p2):
    """Apply distortion to normalized coordinates.

    Returns ``(xd, yd, dxd_dx, dxd_dy, dyd_dx, dyd_dy)``; all inputs broadcast.
    """
    x2, y2, xy = x * x, y * y, x * y
    r2 = x2 + y2
    radial = 1.0 + k1 * r2 + k2 * r2 * r2
    dradial = k1 + 2.0 * k2 * r2  # d radial / d r2
    xd = x * radial + 2.0 * p1 * xy + p2 * (r2 + 2.0 * x2)
    yd = y * radial + p1 * (r2 + 2.0 * y2) + 2.0 * p2 * xy
    dxd_dx = radial + 2.0 * x2 * dradial + 2.0 * p1 * y + 6.0 * p2 * x
    dxd_dy = 2.0 * x * y * dradial + 2.0 * p1 * x + 2.0 * p2 * y
    dyd_dx = 2.0 * x * y * dradial + 2.0 * p1 * x + 2.0 * p2 * y
    dyd_dy = radial + 2.0 * y2 * dradial + 6.0 * p1 * y + 2.0 * p2 * x
    return xd, yd, dxd_dx, dxd_dy, dyd_dx, dyd_dy


def project_batch(params: np.ndarray, X: np.ndarray, jacobian: bool = True):
    """Project camera-frame points.

    ``params`` is ``(..., 8)`` as from ``Intrinsics.as_array`` and broadcasts
    against ``X`` of shape ``(..., 3)``. Returns pixels ``(..., 2)`` and, if
    requested, ``d pixel / d X`` of shape ``(..., 2, 3)``. Callers check depth.
    """
    fx, fy, cx, cy, k1, k2, p1, p2 = np.moveaxis(params, -1, 0)
    z = X[..., 2]
    iz = 1.0 / z
    x = X[..., 0] * iz
    y = X[..., 1] * iz
    xd, yd, a, b, c, d = distort(x, y, k1, k2, p1, p2)
    uv = np.stack([fx * xd + cx, fy * yd + cy], axis=-1)
    if not jacobian:
        return uv, None
    # d(x, y)/dX = [[1/z, 0, -x/z], [0, 1/z, -y/z]]
    J = np.empty(X.shape[:-1] + (2, 3))
    J[..., 0, 0] = fx * a * iz
    J[..., 0, 1] = fx * b * iz
    J[..., 0, 2] = -fx * (a * x + b * y) * iz
    J[..., 1, 0] = fy * c * iz
    J[..., 1, 1] = fy * d * iz
    J[..., 1, 2] = -fy * (c * x + d * y) * iz
    return uv, J


def project(k: Intrinsics, x_cam) -> np.ndarray:
    x_cam = np.asarray(x_cam, dtype=float)
    if x_cam[2] <= MIN_DEPTH:
        raise PointBehindCamera(f"point {x_cam.tolist()} is not in front of the camera")
    uv, _ = project_batch(k.as_array(), x_cam, jacobian=False)
    return uv


def undistort_points(k: Intrinsics, uv) -> np.ndarray:
    """Pixels to undistorted normalized image coordinates (Newton iteration)."""
    uv = np.asarray(uv, dtype=float)
    xd = (uv[..., 0] - k.cx) / k.fx
    yd = (uv[..., 1] - k.cy) / k.fy
    k1, k2, p1, p2 = k.dist
    if not any(k.dist):
        return np.stack([xd, yd], axis=-1)
    x, y = xd.copy(), yd.copy()
    for _ in range(30):
        fx_, fy_, a, b, c, d = distort(x, y, k1, k2, p1, p2)
        ex, ey = fx_ - xd, fy_ - yd
        det = a * d - b * c
        dx = (d * ex - b * ey) / det
        dy = (-c * ex + a * ey) / det
        x -= dx
        y -= dy
        if np.max(np.abs(dx)) < 1e-15 and np.max(np.abs(dy)) < 1e-15:
            break
    return np.stack([x, y], axis=-1)


def tag_object_corners(size: float) -> np.ndarray:
    """Corners s1..s4 of a square tag in its own frame (z = 0 plane)."""
    if not size > 0:
        raise NonPositiveSize(f"tag size must be positive, got {size}")
    h = 0.5 * size
    return np.array([[-h, -h, 0.0], [h, -h, 0.0], [h, h, 0.0], [-h, h, 0.0]])


def pixel_area(corners) -> float:
    """Absolute shoelace area of the detected quadrilateral."""
    c = np.asarray(corners, dtype=float)
    c = c - c.mean(axis=0)  # centering avoids cancellation far from the origin
    x, y = c[:, 0], c[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))
