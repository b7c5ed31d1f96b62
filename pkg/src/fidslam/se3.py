"""
Rigid-body transforms on SO(3) / SE(3).

A ``Pose`` maps coordinates of frame A into frame B (``x_B = T_BA x_A``).
Rotations are stored as unit quaternions ``[qx, qy, qz, qw]`` (scalar last,
``qw >= 0``); matrices are derived on demand.

Tangent vectors (twists) are ordered rotation first: ``[wx, wy, wz, tx, ty, tz]``.
The pose difference used by every factor is

    ominus(A, B) = [ log(Rot(B^-1 A)), Trans(B^-1 A) ]

i.e. the translation of the relative transform is taken as is, not through the
coupled SE(3) logarithm. ``retract`` is the matching update:
``retract(T, [w, p]) = T * (exp(w), p)``.

Array helpers (``exp_so3``, ``log_so3``, ...) accept leading batch dimensions.
"""

from __future__ import annotations

import math

import numpy as np

SMALL_ANGLE = 1e-6
NEAR_PI = math.pi - 1e-6


def skew(v: np.ndarray) -> np.ndarray:
    """Hat operator, batched over leading axes."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def exp_so3(w: np.ndarray) -> np.ndarray:
    """Rodrigues formula with a Taylor branch below ``SMALL_ANGLE``."""
    w = np.asarray(w, dtype=float)
    theta2 = np.sum(w * w, axis=-1)
    theta = np.sqrt(theta2)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    K = skew(w)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def log_so3(R: np.ndarray) -> np.ndarray:
    """Principal-branch logarithm, angle in [0, pi].

    Below ``SMALL_ANGLE`` a Taylor series of theta/sin(theta) is used; above
    ``NEAR_PI`` the axis comes from the symmetric part's dominant eigenvector.
    """
    R = np.asarray(R, dtype=float)
    batch = R.shape[:-2]
    R = R.reshape(-1, 3, 3)
    s_vec = 0.5 * vee(R - np.swapaxes(R, -1, -2))
    s = np.linalg.norm(s_vec, axis=-1)
    c = 0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0)
    theta = np.arctan2(s, c)
    out = np.empty_like(s_vec)

    small = theta < SMALL_ANGLE
    near_pi = theta > NEAR_PI
    mid = ~(small | near_pi)
    if np.any(mid):
        out[mid] = (theta[mid] / s[mid])[:, None] * s_vec[mid]
    if np.any(small):
        t2 = theta[small] ** 2
        out[small] = (1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0)[:, None] * s_vec[small]
    for i in np.flatnonzero(near_pi):
        sym = 0.5 * (R[i] + R[i].T)
        _, vecs = np.linalg.eigh(sym)
        axis = vecs[:, -1]
        if axis @ s_vec[i] < 0.0:
            axis = -axis
        elif s[i] == 0.0:
            # exactly pi: both signs are valid, pick a canonical one
            k = int(np.argmax(np.abs(axis)))
            if axis[k] < 0.0:
                axis = -axis
        out[i] = theta[i] * axis
    return out.reshape(batch + (3,))


def right_jacobian_inv_so3(phi: np.ndarray) -> np.ndarray:
    """d log(exp(phi) exp(d)) / d d at d = 0."""
    phi = np.asarray(phi, dtype=float)
    theta2 = np.sum(phi * phi, axis=-1)
    theta = np.sqrt(theta2)
    small = theta < 1e-4
    safe = np.where(small, 1.0, theta)
    coef = np.where(
        small,
        1.0 / 12.0 + theta2 / 720.0,
        1.0 / (safe * safe) - (1.0 + np.cos(safe)) / (2.0 * safe * np.sin(safe)),
    )
    K = skew(phi)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + 0.5 * K + coef[..., None, None] * (K @ K)


def quat_to_mat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    x, y, z, w = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - z * w)
    out[..., 0, 2] = 2 * (x * z + y * w)
    out[..., 1, 0] = 2 * (x * y + z * w)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - x * w)
    out[..., 2, 0] = 2 * (x * z - y * w)
    out[..., 2, 1] = 2 * (y * z + x * w)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def mat_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method; result normalized with ``qw >= 0``."""
    R = np.asarray(R, dtype=float)
    batch = R.shape[:-2]
    R = R.reshape(-1, 3, 3)
    tr = np.trace(R, axis1=1, axis2=2)
    diag = np.stack([R[:, 0, 0], R[:, 1, 1], R[:, 2, 2]], axis=1)
    choice = np.argmax(np.concatenate([tr[:, None], diag], axis=1), axis=1)
    q = np.empty((R.shape[0], 4))
    for k in range(4):
        m = choice == k
        if not np.any(m):
            continue
        r = R[m]
        if k == 0:
            s = 2.0 * np.sqrt(1.0 + tr[m])
            q[m] = np.stack([(r[:, 2, 1] - r[:, 1, 2]) / s, (r[:, 0, 2] - r[:, 2, 0]) / s,
                             (r[:, 1, 0] - r[:, 0, 1]) / s, 0.25 * s], axis=1)
        elif k == 1:
            s = 2.0 * np.sqrt(1.0 + r[:, 0, 0] - r[:, 1, 1] - r[:, 2, 2])
            q[m] = np.stack([0.25 * s, (r[:, 0, 1] + r[:, 1, 0]) / s,
                             (r[:, 0, 2] + r[:, 2, 0]) / s, (r[:, 2, 1] - r[:, 1, 2]) / s], axis=1)
        elif k == 2:
            s = 2.0 * np.sqrt(1.0 + r[:, 1, 1] - r[:, 0, 0] - r[:, 2, 2])
            q[m] = np.stack([(r[:, 0, 1] + r[:, 1, 0]) / s, 0.25 * s,
                             (r[:, 1, 2] + r[:, 2, 1]) / s, (r[:, 0, 2] - r[:, 2, 0]) / s], axis=1)
        else:
            s = 2.0 * np.sqrt(1.0 + r[:, 2, 2] - r[:, 0, 0] - r[:, 1, 1])
            q[m] = np.stack([(r[:, 0, 2] + r[:, 2, 0]) / s, (r[:, 1, 2] + r[:, 2, 1]) / s,
                             0.25 * s, (r[:, 1, 0] - r[:, 0, 1]) / s], axis=1)
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q[q[:, 3] < 0.0] *= -1.0
    return q.reshape(batch + (4,))


def _quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array([
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
        aw * bw - ax * bx - ay * by - az * bz,
    ])


def _canonical(q: np.ndarray) -> np.ndarray:
    q = q / math.sqrt(float(q @ q))
    return -q if q[3] < 0.0 else q


def _quat_exp(w: np.ndarray) -> np.ndarray:
    theta = math.sqrt(float(w @ w))
    if theta < SMALL_ANGLE:
        half = 0.5 - theta * theta / 48.0
        return np.array([w[0] * half, w[1] * half, w[2] * half, 1.0 - theta * theta / 8.0])
    s = math.sin(0.5 * theta) / theta
    return np.array([w[0] * s, w[1] * s, w[2] * s, math.cos(0.5 * theta)])


class Pose:
    """Immutable rigid transform stored as (unit quaternion, translation)."""

    __slots__ = ("q", "t", "_R")

    def __init__(self, q=None, t=None):
        if q is None:
            q = np.array([0.0, 0.0, 0.0, 1.0])
        else:
            q = np.array(q, dtype=float).reshape(4)
            n = math.sqrt(float(q @ q))
            if n == 0.0:
                raise ValueError("zero quaternion")
            # leave already-normalized input bit-identical (file roundtrips)
            if abs(n - 1.0) > 1e-12:
                q = q / n
            if q[3] < 0.0:
                q = -q
        self.q = q
        self.t = np.zeros(3) if t is None else np.array(t, dtype=float).reshape(3)
        self.q.setflags(write=False)
        self.t.setflags(write=False)
        self._R = None

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_rt(cls, R, t) -> "Pose":
        return cls(mat_to_quat(np.asarray(R, dtype=float)), t)

    @classmethod
    def from_matrix(cls, M) -> "Pose":
        M = np.asarray(M, dtype=float)
        return cls.from_rt(M[:3, :3], M[:3, 3])

    @classmethod
    def from_twist(cls, twist) -> "Pose":
        """Identity retracted by ``twist`` (rotation vector + raw translation)."""
        twist = np.asarray(twist, dtype=float)
        return cls(_quat_exp(twist[:3]), twist[3:])

    @property
    def R(self) -> np.ndarray:
        if self._R is None:
            R = quat_to_mat(self.q)
            R.setflags(write=False)
            self._R = R
        return self._R

    @property
    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def inverse(self) -> "Pose":
        return inverse(self)

    def transform(self, x) -> np.ndarray:
        return transform_point(self, x)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(np.array_equal(self.q, other.q) and np.array_equal(self.t, other.t))

    def __hash__(self):
        return hash((self.q.tobytes(), self.t.tobytes()))

    def __repr__(self) -> str:
        q = ", ".join(f"{v:.6g}" for v in self.q)
        t = ", ".join(f"{v:.6g}" for v in self.t)
        return f"Pose(q=[{q}], t=[{t}])"


def compose(a: Pose, b: Pose) -> Pose:
    """``a * b``: apply ``b`` first, then ``a``."""
    return Pose(_canonical(_quat_mul(a.q, b.q)), a.R @ b.t + a.t)


def inverse(a: Pose) -> Pose:
    qi = np.array([-a.q[0], -a.q[1], -a.q[2], a.q[3]])
    return Pose(qi, -(a.R.T @ a.t))


def transform_point(a: Pose, x) -> np.ndarray:
    return a.R @ np.asarray(x, dtype=float) + a.t


def exp_rotation(w) -> np.ndarray:
    return exp_so3(np.asarray(w, dtype=float))


def log_rotation(R) -> np.ndarray:
    return log_so3(np.asarray(R, dtype=float))


def ominus(a: Pose, b: Pose) -> np.ndarray:
    Rrel = b.R.T @ a.R
    trel = b.R.T @ (a.t - b.t)
    return np.concatenate([log_so3(Rrel), trel])


def retract(a: Pose, delta) -> Pose:
    delta = np.asarray(delta, dtype=float)
    q = _canonical(_quat_mul(a.q, _quat_exp(delta[:3])))
    return Pose(q, a.t + a.R @ delta[3:])


def rot_x(angle: float) -> np.ndarray:
    return exp_so3(np.array([angle, 0.0, 0.0]))


def rot_y(angle: float) -> np.ndarray:
    return exp_so3(np.array([0.0, angle, 0.0]))


def rot_z(angle: float) -> np.ndarray:
    return exp_so3(np.array([0.0, 0.0, angle]))


def random_pose(rng: np.random.Generator, max_angle: float = math.pi, scale: float = 1.0) -> Pose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    return Pose.from_twist(np.concatenate([angle * axis, rng.normal(scale=scale, size=3)]))
