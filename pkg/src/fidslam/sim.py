"""
Synthetic scenes with known ground truth: rendered tag detections and
drifting odometry in the pipeline's own file formats.

Noise is drawn from a counter-based stream keyed by (seed, frame, camera,
tag, corner), so adding or removing a tag never changes another tag's noise.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field, replace

import numpy as np
import yaml

from .camera import MIN_DEPTH, Intrinsics, pixel_area, project_batch, tag_object_corners
from .errors import ValidationError
from .fileio import Detection, DetectionFrame, OdometrySample, format_tag_map, format_trajectory
from .scene import Body, CameraSpec, PosePrior, Scene, Settings, TagSpec, dump_scene
from .se3 import Pose, retract

SIM_FORMAT = "fidslam-sim/1"
TRUTH_NOISE = (1e-3,) * 6


@dataclass
class SimSpec:
    truth: Scene  # every body, tag and camera carries its ground-truth pose as prior
    scene: Scene  # what the solver is told
    times: list
    trajectory: dict  # dynamic body name -> list of world poses, one per frame
    corner_noise_sigma: float = 1.0
    odometry_bias: np.ndarray = field(default_factory=lambda: np.zeros(6))
    odometry_noise: np.ndarray = field(default_factory=lambda: np.zeros(6))
    odometry_sigma: tuple = (2e-3, 2e-3, 2e-3, 1e-2, 1e-2, 1e-2)
    odometry_bodies: tuple = ()
    min_area: float = 20.0
    seed: int = 0

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ValidationError("trajectory times must increase strictly", "times")
        for name, poses in self.trajectory.items():
            if len(poses) != len(self.times):
                raise ValidationError(f"trajectory of {name} has {len(poses)} poses", "trajectory")

    def world_pose(self, body: str, frame: int) -> Pose:
        if body in self.trajectory:
            return self.trajectory[body][frame]
        return self.truth.bodies[body].prior.pose

    def tag_world_pose(self, tag_id: int, frame: int) -> Pose:
        t = self.truth.tags[tag_id]
        return self.world_pose(t.body, frame) @ t.prior.pose


def _stream(seed: int, *counter) -> np.random.Generator:
    words = [int(seed) & 0xFFFFFFFF]
    for c in counter:
        words.append(zlib.crc32(c.encode()) if isinstance(c, str) else int(c) & 0xFFFFFFFF)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


def tag_corners_in_camera(T_cam_tag: Pose, size: float) -> np.ndarray:
    return tag_object_corners(size) @ T_cam_tag.R.T + T_cam_tag.t


def render_corners(k: Intrinsics, T_cam_tag: Pose, size: float, min_area: float = 0.0):
    """Exact pixel corners of a tag, or None if it would not be detected.

    A tag is detected when all corners are in front of the camera and inside
    the image, the tag faces the camera, and its pixel area is at least
    ``min_area``.
    """
    X = tag_corners_in_camera(T_cam_tag, size)
    if np.any(X[:, 2] <= MIN_DEPTH):
        return None
    if float(T_cam_tag.R[:, 2] @ T_cam_tag.t) >= 0.0:
        return None  # seen from behind
    uv, _ = project_batch(k.as_array(), X, jacobian=False)
    if np.any(uv < 0.0) or np.any(uv[:, 0] > k.width) or np.any(uv[:, 1] > k.height):
        return None
    if pixel_area(uv) < min_area:
        return None
    return uv


def corner_noise(seed: int, frame: int, camera: str, tag_id: int, sigma: float) -> np.ndarray:
    if sigma <= 0.0:
        return np.zeros((4, 2))
    return np.array([_stream(seed, frame, camera, tag_id, c).normal(scale=sigma, size=2)
                     for c in range(4)])


def render_detections(spec: SimSpec) -> list[DetectionFrame]:
    frames = []
    for i, stamp in enumerate(spec.times):
        cams = {}
        for cam in spec.truth.cameras.values():
            T_w_cam = spec.world_pose(cam.rig, i) @ cam.extrinsic_prior.pose
            cam_inv = T_w_cam.inverse()
            dets = []
            for tid in sorted(spec.truth.tags):
                tag = spec.truth.tags[tid]
                uv = render_corners(cam.intrinsics, cam_inv @ spec.tag_world_pose(tid, i),
                                    tag.size, spec.min_area)
                if uv is None:
                    continue
                uv = uv + corner_noise(spec.seed, i, cam.name, tid, spec.corner_noise_sigma)
                dets.append(Detection(tid, uv))
            if dets:
                cams[cam.name] = dets
        frames.append(DetectionFrame(stamp, cams))
    return frames


def render_odometry(spec: SimSpec, body: str) -> list[OdometrySample]:
    """Relative body motions perturbed by a per-step bias twist and seeded noise."""
    if body not in spec.trajectory:
        raise ValidationError(f"{body!r} has no trajectory", "body")
    poses = spec.trajectory[body]
    out = []
    for i in range(1, len(poses)):
        delta = retract(poses[i - 1].inverse() @ poses[i], spec.odometry_bias)
        if np.any(spec.odometry_noise > 0):
            delta = retract(delta, _stream(spec.seed, "odometry", body, i).normal(size=6)
                            * spec.odometry_noise)
        out.append(OdometrySample(spec.times[i], body, delta, tuple(spec.odometry_sigma)))
    return out


def dead_reckon(start: Pose, samples) -> list[Pose]:
    poses = [start]
    for s in samples:
        poses.append(poses[-1] @ s.delta)
    return poses


# --------------------------------------------------------------- scenarios


def _prior(pose: Pose) -> PosePrior:
    return PosePrior(pose, TRUTH_NOISE)


def _facing(direction, position) -> Pose:
    """Upright tag whose normal points along ``direction`` (horizontal)."""
    n = np.asarray(direction, dtype=float)
    n = n / np.linalg.norm(n)
    up = np.array([0.0, 0.0, 1.0])
    x = np.cross(up, n)
    return Pose.from_rt(np.column_stack([x, up, n]), position)


def _solver_scene(truth: Scene, known_tags, settings: Settings, default_body: str | None) -> Scene:
    bodies = {n: (replace(b, is_default_tag_body=(n == default_body))) for n, b in truth.bodies.items()}
    tags = {}
    for tid, t in truth.tags.items():
        if tid in known_tags:
            tags[tid] = t
        elif t.body != default_body:
            tags[tid] = replace(t, prior=None)
    return Scene(bodies, tags, dict(truth.cameras), settings)


def make_loop_scenario(size_m: float = 40.0, n_tags: int = 12, n_frames: int = 400, seed: int = 0,
                       n_priors: int | None = None, corner_noise_sigma: float = 1.0,
                       yaw_bias: float = 1e-3, odometry_noise=(5e-4, 5e-4, 5e-4, 2e-3, 2e-3, 2e-3),
                       odometry_sigma=(2e-3, 2e-3, 2e-3, 3e-3, 3e-3, 3e-3),
                       tag_size: float = 0.8, wall_distance: float = 3.5, focal: float = 800.0,
                       width: int = 1920, height: int = 1080) -> SimSpec:
    """Square loop of perimeter ``size_m`` with tags on walls right of the path.

    A camera on the rig looks right, out of the loop, at tags placed
    ``wall_distance`` beyond the path. Each side carries an equal share of the
    tags, spread between 10% and 90% of its length so that a tag is in view
    right after every corner. ``n_priors`` of them (default a third, the middle
    ones for three per side) are given to the solver as priors; the others
    belong to the default ``lab`` body and must be discovered. The trajectory
    starts opposite the first prior tag.
    """
    if not (size_m > 0 and n_frames > 1 and n_tags >= 0):
        raise ValidationError("size, frame count and tag count must be positive", "scenario")
    side = size_m / 4.0
    if n_priors is None:
        n_priors = n_tags // 3
    stride = n_tags // n_priors if n_priors else 0
    known = [i * stride + stride // 2 for i in range(n_priors)]

    def on_path(s):
        s = s % size_m
        k = int(s // side) % 4
        psi = k * math.pi / 2
        d = np.array([math.cos(psi), math.sin(psi), 0.0])
        corners = [(0, 0), (side, 0), (side, side), (0, side)]
        p = np.array([*corners[k], 0.0]) + (s - k * side) * d
        return p, psi, d

    arcs = []
    for k in range(4):
        m = n_tags // 4 + (1 if k < n_tags % 4 else 0)
        offsets = np.linspace(0.1 * side, 0.9 * side, m) if m > 1 else [0.5 * side] * m
        arcs.extend(k * side + o for o in offsets)
    tags = {}
    for k, s in enumerate(arcs):
        p, psi, d = on_path(s)
        right = np.array([d[1], -d[0], 0.0])
        tags[k] = TagSpec(k, tag_size, "lab", _prior(_facing(-right, p + wall_distance * right)))

    s0 = arcs[known[0]] if known else side / 2
    rig = []
    for i in range(n_frames):
        p, psi, _ = on_path(s0 + i * size_m / n_frames)
        rig.append(Pose.from_rt(np.array([[math.cos(psi), -math.sin(psi), 0.0],
                                          [math.sin(psi), math.cos(psi), 0.0],
                                          [0.0, 0.0, 1.0]]), p))
    # camera looks right of travel (-y), image up = +z
    cam_in_rig = Pose.from_rt(np.column_stack([[-1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, -1.0, 0.0]]),
                              np.zeros(3))
    intr = Intrinsics(focal, focal, width / 2, height / 2, width=width, height=height)
    truth = Scene(
        bodies={"lab": Body("lab", "static", _prior(Pose.identity())), "rig": Body("rig", "dynamic")},
        tags=tags,
        cameras={"cam0": CameraSpec("cam0", intr, "rig", _prior(cam_in_rig))},
    )
    scene = _solver_scene(truth, set(known), Settings(default_tag_size=tag_size), "lab")
    bias = np.array([0.0, 0.0, yaw_bias, 0.0, 0.0, 0.0])
    return SimSpec(truth, scene, [0.1 * i for i in range(n_frames)], {"rig": rig},
                   corner_noise_sigma, bias, np.asarray(odometry_noise, dtype=float),
                   tuple(odometry_sigma), ("rig",), seed=seed)


def make_block_scenario(n_frames: int = 20, seed: int = 0, corner_noise_sigma: float = 0.0) -> SimSpec:
    """A static lab with tag 2, a moving camera rig and a moving block.

    Tag 2 (on the lab) and tag 105 (on the block) have priors; the block's
    other tags 106 and 107 are discovered. The rig carries odometry.
    """
    face = np.array([-1.0, 0.0, 0.0])
    lab_tags = {2: TagSpec(2, 0.1, "lab", _prior(_facing(face, [1.5, 0.25, 0.0])))}
    block_tags = {
        105: TagSpec(105, 0.08, "block", _prior(_facing(face, [0.0, 0.0, 0.0]))),
        106: TagSpec(106, 0.08, "block", _prior(_facing(face, [0.0, 0.0, 0.12]))),
        107: TagSpec(107, 0.08, "block", _prior(_facing(face, [0.0, -0.14, 0.0]))),
    }
    # camera looks along world +x, image up = world +z
    look = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    rig, block = [], []
    for i in range(n_frames):
        a = 2 * math.pi * i / n_frames
        rig.append(Pose.from_rt(look, [0.1 * math.sin(a), 0.05 * math.cos(a), 0.03 * math.sin(2 * a)]))
        yaw = 0.15 * math.sin(a)
        Rb = np.array([[math.cos(yaw), -math.sin(yaw), 0.0], [math.sin(yaw), math.cos(yaw), 0.0],
                       [0.0, 0.0, 1.0]])
        block.append(Pose.from_rt(Rb, [1.5, -0.2 + 0.05 * math.sin(a), 0.02 * math.cos(a)]))
    truth = Scene(
        bodies={"lab": Body("lab", "static", _prior(Pose.identity())),
                "rig": Body("rig", "dynamic"), "block": Body("block", "dynamic")},
        tags={**lab_tags, **block_tags},
        cameras={"cam0": CameraSpec("cam0", Intrinsics(600.0, 600.0, 320.0, 240.0, width=640, height=480),
                                    "rig", _prior(Pose.identity()))},
    )
    scene = _solver_scene(truth, {2, 105}, Settings(), None)
    return SimSpec(truth, scene, [0.1 * i for i in range(n_frames)], {"rig": rig, "block": block},
                   corner_noise_sigma, np.zeros(6), np.zeros(6), (1e-3,) * 3 + (5e-3,) * 3,
                   ("rig",), seed=seed)


SCENARIOS = {"loop": make_loop_scenario, "block": make_block_scenario}


def spec_from_doc(doc) -> SimSpec:
    """Build a SimSpec from a recipe ``{format, scenario, params}``."""
    if isinstance(doc, str):
        doc = yaml.safe_load(doc)
    if not isinstance(doc, dict) or doc.get("format", SIM_FORMAT) != SIM_FORMAT:
        raise ValidationError(f"expected format {SIM_FORMAT}", "format")
    name = doc.get("scenario", "loop")
    if name not in SCENARIOS:
        raise ValidationError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}", "scenario")
    try:
        return SCENARIOS[name](**(doc.get("params") or {}))
    except TypeError as exc:
        raise ValidationError(str(exc), "params") from None


def truth_tag_map(spec: SimSpec) -> str:
    entries = []
    for tid in sorted(spec.truth.tags):
        t = spec.truth.tags[tid]
        known = spec.scene.tags.get(tid)
        src = "prior" if known is not None and known.prior is not None else "discovered"
        entries.append((t, t.prior.pose, src))
    return format_tag_map(entries)


def write_simulation(spec: SimSpec, out_dir) -> dict:
    """Write scene, detections, odometry and ground truth; returns the paths."""
    from pathlib import Path

    from .fileio import dump_detections, dump_odometry

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"scene": out / "scene.yaml", "detections": out / "detections.jsonl",
             "odometry": out / "odometry.jsonl", "truth_tags": out / "truth_tags.yaml"}
    paths["scene"].write_text(dump_scene(spec.scene))
    paths["detections"].write_text(dump_detections(render_detections(spec)))
    odo = [s for b in spec.odometry_bodies for s in render_odometry(spec, b)]
    odo.sort(key=lambda s: (s.time, s.body))
    paths["odometry"].write_text(dump_odometry(odo))
    paths["truth_tags"].write_text(truth_tag_map(spec))
    for body, poses in spec.trajectory.items():
        p = out / f"truth_{body}.txt"
        p.write_text(format_trajectory(zip(spec.times, poses)))
        paths[f"truth_{body}"] = p
    return paths
