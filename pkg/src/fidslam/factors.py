"""
Pose variables, the three factor types, and the bipartite graph container.

All residuals are whitened (divided by their standard deviations). Jacobians
are taken with respect to the right perturbation used by ``se3.retract``::

    T -> T * (exp(w), p)        twist = [w, p]

The residual/Jacobian kernels (``*_kernel``) work on stacked arrays so the
optimizer can linearize every factor of one type in a single numpy call.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .camera import MIN_DEPTH, Intrinsics, project_batch, tag_object_corners
from .errors import PointBehindCamera
from .se3 import Pose, log_so3, quat_to_mat, right_jacobian_inv_so3, skew

CAMERA = "camera_in_rig"
TAG = "tag_in_body"
STATIC_BODY = "static_body_in_world"
DYNAMIC_BODY = "dynamic_body_in_world"


class VariableKey(NamedTuple):
    kind: str
    owner: str
    time: int = -1

    def __str__(self) -> str:
        if self.kind == DYNAMIC_BODY:
            return f"{self.owner}@{self.time}"
        return f"{self.kind}:{self.owner}"

    @property
    def is_dynamic(self) -> bool:
        return self.kind == DYNAMIC_BODY


def camera_key(name: str) -> VariableKey:
    return VariableKey(CAMERA, name)


def tag_key(tag_id: int) -> VariableKey:
    return VariableKey(TAG, str(tag_id))


def body_key(name: str, time: int | None = None) -> VariableKey:
    if time is None:
        return VariableKey(STATIC_BODY, name)
    return VariableKey(DYNAMIC_BODY, name, int(time))


# ------------------------------------------------------------------ kernels


def absolute_kernel(R, t, R0, t0, isig, jacobian=True):
    """Residual ``(T ominus T0) * isig`` for stacked poses."""
    R0T = np.swapaxes(R0, -1, -2)
    E = R0T @ R
    e = log_so3(E)
    r = np.concatenate([e, np.einsum("nij,nj->ni", R0T, t - t0)], axis=1) * isig
    if not jacobian:
        return r, None
    n = R.shape[0]
    J = np.zeros((n, 6, 6))
    J[:, :3, :3] = right_jacobian_inv_so3(e)
    J[:, 3:, 3:] = E
    J *= isig[:, :, None]
    return r, [J]


def relative_kernel(Ra, ta, Rb, tb, Rd, td, isig, jacobian=True):
    """Residual ``((Tb^-1 Ta) ominus D) * isig``."""
    RbT = np.swapaxes(Rb, -1, -2)
    RdT = np.swapaxes(Rd, -1, -2)
    v = np.einsum("nij,nj->ni", RbT, ta - tb)
    E = RdT @ RbT @ Ra
    e = log_so3(E)
    rt = np.einsum("nij,nj->ni", RdT, v - td)
    r = np.concatenate([e, rt], axis=1) * isig
    if not jacobian:
        return r, None
    n = Ra.shape[0]
    Jri = right_jacobian_inv_so3(e)
    Ja = np.zeros((n, 6, 6))
    Jb = np.zeros((n, 6, 6))
    Ja[:, :3, :3] = Jri
    Ja[:, 3:, 3:] = RdT @ RbT @ Ra
    Jb[:, :3, :3] = -Jri @ np.swapaxes(Ra, -1, -2) @ Rb
    Jb[:, 3:, :3] = RdT @ skew(v)
    Jb[:, 3:, 3:] = -RdT
    Ja *= isig[:, :, None]
    Jb *= isig[:, :, None]
    return r, [Ja, Jb]


def projection_kernel(Rb, tb, Rc, tc, Rg, tg, Rq, tq, S, uv, params, isig, jacobian=True):
    """Stacked tag projection residuals.

    Slots: world-from-body ``b``, rig-from-camera ``c``, body-from-tag ``g``,
    world-from-rig ``q``. ``S`` holds object corners ``(n, 4, 3)``, ``uv``
    detections ``(n, 4, 2)``, ``params`` intrinsics ``(n, 8)``, ``isig`` 1/sigma_p.
    Raises PointBehindCamera with ``factor`` set to the offending row index.
    """
    xb = np.einsum("nij,nkj->nki", Rg, S) + tg[:, None, :]
    xw = np.einsum("nij,nkj->nki", Rb, xb) + tb[:, None, :]
    RqT = np.swapaxes(Rq, -1, -2)
    RcT = np.swapaxes(Rc, -1, -2)
    y = np.einsum("nij,nkj->nki", RqT, xw - tq[:, None, :])
    xc = np.einsum("nij,nkj->nki", RcT, y - tc[:, None, :])
    bad = np.flatnonzero(np.any(xc[..., 2] <= MIN_DEPTH, axis=1))
    if bad.size:
        raise PointBehindCamera(f"tag corner behind camera in row {bad[0]}", factor=int(bad[0]))
    pix, P = project_batch(params[:, None, :], xc, jacobian=jacobian)
    r = ((pix - uv) * isig[:, None, None]).reshape(-1, 8)
    if not jacobian:
        return r, None
    n = S.shape[0]
    Mw = RcT @ RqT  # d xc / d xw
    Mb = Mw @ Rb  # d xc / d xb
    D = np.empty((4, n, 4, 3, 6))  # slot, factor, corner, xyz, twist
    D[0, :, :, :, :3] = -np.einsum("nij,nkjl->nkil", Mw @ Rb, skew(xb))
    D[0, :, :, :, 3:] = (Mw @ Rb)[:, None]
    D[1, :, :, :, :3] = skew(xc)
    D[1, :, :, :, 3:] = -np.eye(3)
    D[2, :, :, :, :3] = -np.einsum("nij,nkjl->nkil", Mb @ Rg, skew(S))
    D[2, :, :, :, 3:] = (Mb @ Rg)[:, None]
    D[3, :, :, :, :3] = np.einsum("nij,nkjl->nkil", RcT, skew(y))
    D[3, :, :, :, 3:] = -RcT[:, None]
    J = np.einsum("nkab,snkbl->snkal", P, D) * isig[None, :, None, None, None]
    return r, [J[s].reshape(n, 8, 6) for s in range(4)]


def _stack(poses):
    q = np.array([p.q for p in poses]).reshape(-1, 4)
    t = np.array([p.t for p in poses]).reshape(-1, 3)
    return quat_to_mat(q), t


# ------------------------------------------------------------------ factors


@dataclass(frozen=True, eq=False)
class AbsolutePosePrior:
    fid: int
    target: VariableKey
    prior: Pose
    sigma: tuple
    kind = "absolute"
    dim = 6

    @property
    def keys(self) -> tuple:
        return (self.target,)

    def residual(self, values) -> np.ndarray:
        return self.linearize(values, jacobian=False)[0]

    def jacobians(self, values) -> list:
        return self.linearize(values)[1]

    def linearize(self, values, jacobian=True):
        R, t = _stack([values[self.target]])
        r, J = absolute_kernel(R, t, self.prior.R[None], self.prior.t[None],
                               1.0 / np.asarray(self.sigma)[None], jacobian)
        return r[0], (None if J is None else [j[0] for j in J])


@dataclass(frozen=True, eq=False)
class RelativePosePrior:
    fid: int
    a: VariableKey
    b: VariableKey
    delta: Pose
    sigma: tuple
    kind = "relative"
    dim = 6

    @property
    def keys(self) -> tuple:
        return (self.a, self.b)

    def residual(self, values) -> np.ndarray:
        return self.linearize(values, jacobian=False)[0]

    def jacobians(self, values) -> list:
        return self.linearize(values)[1]

    def linearize(self, values, jacobian=True):
        Ra, ta = _stack([values[self.a]])
        Rb, tb = _stack([values[self.b]])
        r, J = relative_kernel(Ra, ta, Rb, tb, self.delta.R[None], self.delta.t[None],
                               1.0 / np.asarray(self.sigma)[None], jacobian)
        return r[0], (None if J is None else [j[0] for j in J])


@dataclass(frozen=True, eq=False)
class TagProjection:
    fid: int
    body: VariableKey
    cam: VariableKey
    tag: VariableKey
    rig: VariableKey
    corners: np.ndarray
    camera: str
    tag_id: int
    tag_size: float
    sigma_p: float
    intrinsics: Intrinsics
    time: int = -1
    body_name: str = ""
    area: float = field(default=0.0)
    kind = "projection"
    dim = 8

    @property
    def keys(self) -> tuple:
        return (self.body, self.cam, self.tag, self.rig)

    @property
    def object_corners(self) -> np.ndarray:
        return tag_object_corners(self.tag_size)

    def residual(self, values) -> np.ndarray:
        return self.linearize(values, jacobian=False)[0]

    def jacobians(self, values) -> list:
        return self.linearize(values)[1]

    def linearize(self, values, jacobian=True):
        arrays = []
        for k in self.keys:
            arrays.extend(_stack([values[k]]))
        try:
            r, J = projection_kernel(*arrays, self.object_corners[None],
                                     np.asarray(self.corners, dtype=float)[None],
                                     self.intrinsics.as_array()[None],
                                     np.array([1.0 / self.sigma_p]), jacobian)
        except PointBehindCamera as exc:
            raise PointBehindCamera(str(exc), factor=self.fid) from None
        return r[0], (None if J is None else [j[0] for j in J])


def describe(f) -> dict:
    """Flat descriptor used by diagnostics output."""
    if f.kind == "projection":
        return {"factor_kind": "projection", "camera": f.camera, "tag": str(f.tag_id),
                "body": f.body_name}
    if f.kind == "relative":
        return {"factor_kind": "relative", "camera": "", "tag": "", "body": f.a.owner}
    target = f.target
    return {"factor_kind": "absolute", "camera": target.owner if target.kind == CAMERA else "",
            "tag": target.owner if target.kind == TAG else "",
            "body": target.owner if target.kind in (STATIC_BODY, DYNAMIC_BODY) else ""}


# ------------------------------------------------------------ batched plan


class LinearizationPlan:
    """Stacked factor data for one fixed set of factors and variable index.

    ``index`` maps each key touched by the factors to a row of the pose arrays
    passed to ``evaluate``.
    """

    def __init__(self, factors, index: dict):
        self.factors = list(factors)
        self.groups = []
        by_kind: dict[str, list] = {"absolute": [], "relative": [], "projection": []}
        for pos, f in enumerate(self.factors):
            by_kind[f.kind].append(pos)
        if by_kind["absolute"]:
            fs = [self.factors[p] for p in by_kind["absolute"]]
            R0, t0 = _stack([f.prior for f in fs])
            self.groups.append(dict(
                kind="absolute", pos=np.array(by_kind["absolute"]), dim=6,
                slots=np.array([[index[f.target]] for f in fs]),
                R0=R0, t0=t0, isig=1.0 / np.array([f.sigma for f in fs], dtype=float)))
        if by_kind["relative"]:
            fs = [self.factors[p] for p in by_kind["relative"]]
            Rd, td = _stack([f.delta for f in fs])
            self.groups.append(dict(
                kind="relative", pos=np.array(by_kind["relative"]), dim=6,
                slots=np.array([[index[f.a], index[f.b]] for f in fs]),
                Rd=Rd, td=td, isig=1.0 / np.array([f.sigma for f in fs], dtype=float)))
        if by_kind["projection"]:
            fs = [self.factors[p] for p in by_kind["projection"]]
            self.groups.append(dict(
                kind="projection", pos=np.array(by_kind["projection"]), dim=8,
                slots=np.array([[index[k] for k in f.keys] for f in fs]),
                S=np.array([f.object_corners for f in fs]),
                uv=np.array([f.corners for f in fs], dtype=float),
                params=np.array([f.intrinsics.as_array() for f in fs]),
                isig=np.array([1.0 / f.sigma_p for f in fs])))

    def evaluate(self, Rs, ts, jacobian=True):
        """Yield ``(group, residuals, jacobian_list)`` per factor type.

        PointBehindCamera is re-raised with ``factor`` set to the factor id.
        """
        out = []
        for g in self.groups:
            s = g["slots"]
            if g["kind"] == "absolute":
                r, J = absolute_kernel(Rs[s[:, 0]], ts[s[:, 0]], g["R0"], g["t0"], g["isig"], jacobian)
            elif g["kind"] == "relative":
                r, J = relative_kernel(Rs[s[:, 0]], ts[s[:, 0]], Rs[s[:, 1]], ts[s[:, 1]],
                                       g["Rd"], g["td"], g["isig"], jacobian)
            else:
                try:
                    r, J = projection_kernel(
                        Rs[s[:, 0]], ts[s[:, 0]], Rs[s[:, 1]], ts[s[:, 1]],
                        Rs[s[:, 2]], ts[s[:, 2]], Rs[s[:, 3]], ts[s[:, 3]],
                        g["S"], g["uv"], g["params"], g["isig"], jacobian)
                except PointBehindCamera as exc:
                    fid = self.factors[g["pos"][exc.factor]].fid
                    raise PointBehindCamera(str(exc), factor=fid) from None
            out.append((g, r, J))
        return out

    def error(self, Rs, ts) -> float:
        return 0.5 * sum(float(np.sum(r * r)) for _, r, _ in self.evaluate(Rs, ts, jacobian=False))

    def factor_norms(self, Rs, ts) -> dict:
        norms = {}
        for g, r, _ in self.evaluate(Rs, ts, jacobian=False):
            for p, n in zip(g["pos"], np.linalg.norm(r, axis=1)):
                norms[self.factors[p].fid] = float(n)
        return norms


def stack_values(values: dict, keys) -> tuple:
    keys = list(keys)
    index = {k: i for i, k in enumerate(keys)}
    Rs, ts = _stack([values[k] for k in keys])
    return index, Rs, ts


# -------------------------------------------------------------------- graph


class Graph:
    """Variables with current values, factors, and the adjacency between them.

    Dicts are used as ordered sets so iteration order never depends on hashing.
    """

    def __init__(self):
        self.values: dict[VariableKey, Pose] = {}
        self.factors: dict[int, object] = {}
        self.adjacency: dict[VariableKey, dict[int, None]] = {}
        self.last_error: dict[int, float] = {}

    def __contains__(self, key) -> bool:
        return key in self.values

    def add_variable(self, key: VariableKey, value: Pose | None = None):
        self.adjacency.setdefault(key, {})
        if value is not None:
            self.values[key] = value

    def add_factor(self, f):
        if f.fid in self.factors:
            return
        self.factors[f.fid] = f
        for k in f.keys:
            self.adjacency.setdefault(k, {})[f.fid] = None

    def remove_factor(self, fid: int):
        f = self.factors.pop(fid)
        for k in f.keys:
            self.adjacency[k].pop(fid, None)
        self.last_error.pop(fid, None)

    def factors_of(self, key) -> list:
        return [self.factors[i] for i in self.adjacency.get(key, ())]

    def check(self):
        for f in self.factors.values():
            for k in f.keys:
                assert k in self.adjacency and f.fid in self.adjacency[k], (f.fid, k)

    def total_error(self, factors=None) -> float:
        """Half the summed squared whitened residuals; records per-factor norms."""
        factors = list(self.factors.values()) if factors is None else list(factors)
        if not factors:
            return 0.0
        keys = list(dict.fromkeys(k for f in factors for k in f.keys))
        index, Rs, ts = stack_values(self.values, keys)
        plan = LinearizationPlan(factors, index)
        norms = plan.factor_norms(Rs, ts)
        self.last_error.update(norms)
        return 0.5 * sum(n * n for n in norms.values())
