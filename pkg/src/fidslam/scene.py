"""
Declarative scene: bodies, the tags attached to them, and the cameras they carry.

Config documents are YAML (or an equivalent dict)::

    format: fidslam-scene/1
    settings:
      subgraph_error_threshold: 4.0
      default_tag_size: 0.16
    bodies:
      - {name: lab, kind: static, default_tag_body: true,
         prior: {position: [0, 0, 0], rotation: [0, 0, 0, 1], noise: [...]}}
      - {name: rig, kind: dynamic}
    tags:
      - {id: 2, size: 0.16, body: lab, prior: {...}}
    cameras:
      - name: cam0
        rig: rig
        intrinsics: {fx: 600, fy: 600, cx: 320, cy: 240, dist: [0, 0, 0, 0],
                     width: 640, height: 480}
        extrinsic_prior: {...}

Rotations are quaternions ``[qx, qy, qz, qw]``. Noise entries are six standard
deviations, rotation (rad) first, then translation (m).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .camera import Intrinsics
from .errors import NonPositiveSize, ParseError, ValidationError
from .se3 import Pose

SCENE_FORMAT = "fidslam-scene/1"
DEFAULT_PRIOR_NOISE = (1e-3, 1e-3, 1e-3, 1e-3, 1e-3, 1e-3)
AMBIGUITY_RULES = ("decisive", "literal")


@dataclass(frozen=True)
class PosePrior:
    pose: Pose
    noise: tuple

    def __post_init__(self):
        noise = tuple(float(s) for s in self.noise)
        if len(noise) != 6 or not all(s > 0 for s in noise):
            raise ValidationError("prior noise must be six positive sigmas")
        object.__setattr__(self, "noise", noise)


@dataclass(frozen=True)
class Body:
    name: str
    kind: str  # "static" | "dynamic"
    prior: PosePrior | None = None
    is_default_tag_body: bool = False

    @property
    def is_static(self) -> bool:
        return self.kind == "static"


@dataclass(frozen=True)
class TagSpec:
    id: int
    size: float
    body: str
    prior: PosePrior | None = None


@dataclass(frozen=True)
class CameraSpec:
    name: str
    intrinsics: Intrinsics
    rig: str
    extrinsic_prior: PosePrior | None = None


@dataclass(frozen=True)
class Settings:
    ambiguity_ratio_threshold: float = 0.3
    max_ambiguous_view_angle: float = 60.0
    ambiguity_rule: str = "decisive"
    ambiguity_margin: float = 0.85
    subgraph_error_threshold: float = 4.0
    pixel_noise: float = 1.0
    default_tag_size: float | None = None
    pin_sigma: float = 1e-3
    max_rotations: int | None = None
    # frames an undetermined dynamic pose stays reachable by discovery
    discovery_horizon: int | None = 20


@dataclass(frozen=True)
class Scene:
    bodies: dict = field(default_factory=dict)
    tags: dict = field(default_factory=dict)
    cameras: dict = field(default_factory=dict)
    settings: Settings = field(default_factory=Settings)

    @property
    def default_body(self) -> Body | None:
        for b in self.bodies.values():
            if b.is_default_tag_body:
                return b
        return None

    def with_settings(self, **changes) -> "Scene":
        return replace(self, settings=replace(self.settings, **changes))


def resolve_tag(scene: Scene, tag_id: int) -> TagSpec | None:
    """Configured tag spec, a prior-less spec on the default body, or None."""
    spec = scene.tags.get(tag_id)
    if spec is not None:
        return spec
    default = scene.default_body
    if default is None:
        return None
    return TagSpec(id=tag_id, size=scene.settings.default_tag_size, body=default.name)


def validate_solvability(scene: Scene) -> list[str]:
    warnings = []
    has_static_prior = any(b.prior is not None for b in scene.bodies.values())
    if not has_static_prior:
        warnings.append("gauge not fixed: no static body carries a world pose prior")
    for cam in scene.cameras.values():
        if cam.extrinsic_prior is None:
            rig_tags = [t for t in scene.tags.values() if t.body == cam.rig and t.prior is not None]
            if not rig_tags and not scene.bodies[cam.rig].is_static:
                warnings.append(
                    f"camera {cam.name} has no extrinsic prior and its rig carries no known tags; "
                    "extrinsics are only recoverable with odometry or a second calibrated camera"
                )
    return warnings


# ---------------------------------------------------------------- parsing


def _pose_from_doc(doc, path: str) -> Pose:
    if not isinstance(doc, dict):
        raise ValidationError("pose must be a mapping", path)
    pos = doc.get("position", [0.0, 0.0, 0.0])
    rot = doc.get("rotation", [0.0, 0.0, 0.0, 1.0])
    try:
        pos = [float(v) for v in pos]
        rot = [float(v) for v in rot]
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"non-numeric pose entry ({exc})", path) from None
    if len(pos) != 3 or len(rot) != 4:
        raise ValidationError("position needs 3 values, rotation 4 (qx qy qz qw)", path)
    if not all(math.isfinite(v) for v in pos + rot) or np.linalg.norm(rot) < 1e-9:
        raise ValidationError("pose values must be finite with a non-zero quaternion", path)
    return Pose(rot, pos)


def _prior_from_doc(doc, path: str) -> PosePrior | None:
    if doc is None:
        return None
    pose = _pose_from_doc(doc, path)
    noise = doc.get("noise", DEFAULT_PRIOR_NOISE)
    try:
        return PosePrior(pose, tuple(noise))
    except (ValidationError, TypeError, ValueError):
        raise ValidationError("noise must be six positive sigmas", path + ".noise") from None


def _expect_list(doc, key):
    items = doc.get(key, []) or []
    if not isinstance(items, list):
        raise ValidationError("expected a list", key)
    return items


def load_scene(source) -> Scene:
    """Build a validated Scene from a dict, YAML text, or a path to a YAML file."""
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source
                                    and source.endswith((".yaml", ".yml"))):
        try:
            source = Path(source).read_text()
        except OSError as exc:
            raise ParseError(f"cannot read scene file: {exc}") from None
    if isinstance(source, str):
        try:
            source = yaml.safe_load(source)
        except yaml.YAMLError as exc:
            raise ParseError(f"malformed scene document: {exc}") from None
    if not isinstance(source, dict):
        raise ParseError("scene document must be a mapping")
    doc = source
    fmt = doc.get("format", SCENE_FORMAT)
    if fmt != SCENE_FORMAT:
        raise ValidationError(f"unsupported format {fmt!r}", "format")

    sdoc = doc.get("settings", {}) or {}
    if not isinstance(sdoc, dict):
        raise ValidationError("expected a mapping", "settings")
    known = set(Settings.__dataclass_fields__)
    for key in sdoc:
        if key not in known:
            raise ValidationError(f"unknown setting {key!r}", f"settings.{key}")
    settings = Settings(**sdoc)
    if settings.ambiguity_rule not in AMBIGUITY_RULES:
        raise ValidationError(f"must be one of {AMBIGUITY_RULES}", "settings.ambiguity_rule")
    for name in ("subgraph_error_threshold", "pixel_noise", "pin_sigma"):
        if not getattr(settings, name) > 0:
            raise ValidationError("must be positive", f"settings.{name}")
    for name in ("max_rotations", "discovery_horizon"):
        v = getattr(settings, name)
        if v is not None and not (isinstance(v, int) and v >= (0 if name == "max_rotations" else 1)):
            raise ValidationError("must be a positive integer or null", f"settings.{name}")

    bodies: dict[str, Body] = {}
    for i, bdoc in enumerate(_expect_list(doc, "bodies")):
        path = f"bodies[{i}]"
        if not isinstance(bdoc, dict) or "name" not in bdoc:
            raise ValidationError("body needs a name", path)
        name = str(bdoc["name"])
        if name in bodies:
            raise ValidationError(f"duplicate body name {name}", path + ".name")
        kind = bdoc.get("kind", "static")
        if kind not in ("static", "dynamic"):
            raise ValidationError("kind must be static or dynamic", path + ".kind")
        prior = _prior_from_doc(bdoc.get("prior"), path + ".prior")
        if kind == "dynamic" and prior is not None:
            raise ValidationError("dynamic bodies cannot carry a world pose prior", path + ".prior")
        bodies[name] = Body(name, kind, prior, bool(bdoc.get("default_tag_body", False)))
    defaults = [b.name for b in bodies.values() if b.is_default_tag_body]
    if len(defaults) > 1:
        raise ValidationError(f"more than one default tag body: {defaults}", "bodies")
    if defaults:
        size = settings.default_tag_size
        if size is None:
            raise ValidationError("required when a default tag body is declared",
                                  "settings.default_tag_size")
        if not size > 0:
            raise NonPositiveSize("must be positive", "settings.default_tag_size")

    tags: dict[int, TagSpec] = {}
    for i, tdoc in enumerate(_expect_list(doc, "tags")):
        path = f"tags[{i}]"
        if not isinstance(tdoc, dict) or "id" not in tdoc:
            raise ValidationError("tag needs an id", path)
        tid = tdoc["id"]
        if not isinstance(tid, int) or isinstance(tid, bool) or tid < 0:
            raise ValidationError("tag id must be a non-negative integer", path + ".id")
        if tid in tags:
            raise ValidationError(f"duplicate tag id {tid}", path + ".id")
        size = tdoc.get("size", settings.default_tag_size)
        if size is None or not float(size) > 0:
            raise NonPositiveSize(f"tag {tid} size must be positive", path + ".size")
        body = tdoc.get("body")
        if body not in bodies:
            raise ValidationError(f"unknown body {body!r}", path + ".body")
        tags[tid] = TagSpec(tid, float(size), body, _prior_from_doc(tdoc.get("prior"), path + ".prior"))

    cameras: dict[str, CameraSpec] = {}
    for i, cdoc in enumerate(_expect_list(doc, "cameras")):
        path = f"cameras[{i}]"
        if not isinstance(cdoc, dict) or "name" not in cdoc:
            raise ValidationError("camera needs a name", path)
        name = str(cdoc["name"])
        if name in cameras:
            raise ValidationError(f"duplicate camera name {name}", path + ".name")
        rig = cdoc.get("rig")
        if rig not in bodies:
            raise ValidationError(f"unknown rig body {rig!r}", path + ".rig")
        idoc = cdoc.get("intrinsics")
        if not isinstance(idoc, dict):
            raise ValidationError("intrinsics mapping required", path + ".intrinsics")
        try:
            intr = Intrinsics(
                fx=float(idoc["fx"]), fy=float(idoc["fy"]), cx=float(idoc["cx"]), cy=float(idoc["cy"]),
                dist=tuple(idoc.get("dist", (0.0, 0.0, 0.0, 0.0))),
                width=int(idoc["width"]), height=int(idoc["height"]),
            )
        except KeyError as exc:
            raise ValidationError(f"missing intrinsic {exc}", path + ".intrinsics") from None
        except ValidationError as exc:
            raise ValidationError(str(exc), path + ".intrinsics") from None
        prior = _prior_from_doc(cdoc.get("extrinsic_prior"), path + ".extrinsic_prior")
        cameras[name] = CameraSpec(name, intr, rig, prior)

    return Scene(bodies=bodies, tags=tags, cameras=cameras, settings=settings)


def _pose_doc(prior: PosePrior) -> dict:
    return {
        "position": [float(v) for v in prior.pose.t],
        "rotation": [float(v) for v in prior.pose.q],
        "noise": list(prior.noise),
    }


def scene_to_dict(scene: Scene) -> dict:
    """Inverse of ``load_scene``: ``load_scene(scene_to_dict(s)) == s``."""
    s = scene.settings
    settings = {k: getattr(s, k) for k in Settings.__dataclass_fields__}
    bodies = []
    for b in scene.bodies.values():
        d = {"name": b.name, "kind": b.kind}
        if b.is_default_tag_body:
            d["default_tag_body"] = True
        if b.prior is not None:
            d["prior"] = _pose_doc(b.prior)
        bodies.append(d)
    tags = []
    for t in scene.tags.values():
        d = {"id": t.id, "size": t.size, "body": t.body}
        if t.prior is not None:
            d["prior"] = _pose_doc(t.prior)
        tags.append(d)
    cameras = []
    for c in scene.cameras.values():
        k = c.intrinsics
        d = {
            "name": c.name,
            "rig": c.rig,
            "intrinsics": {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy, "dist": list(k.dist),
                           "width": k.width, "height": k.height},
        }
        if c.extrinsic_prior is not None:
            d["extrinsic_prior"] = _pose_doc(c.extrinsic_prior)
        cameras.append(d)
    return {"format": SCENE_FORMAT, "settings": settings, "bodies": bodies, "tags": tags,
            "cameras": cameras}


def dump_scene(scene: Scene) -> str:
    return yaml.safe_dump(scene_to_dict(scene), sort_keys=False)
