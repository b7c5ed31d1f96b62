"""
Readers and writers for the pipeline's log and result files.

All files start with a version marker. Quaternions are ``qx qy qz qw``
(scalar last) everywhere on disk.

Detection log (JSON lines, one frame per line after the header)::

    {"format": "fidslam-detections/1"}
    {"time": 0.0, "cameras": {"cam0": [{"tag": 2, "corners": [[u, v], x4]}]}}

Corners follow the tag corner order: (-l/2,-l/2), (l/2,-l/2), (l/2,l/2), (-l/2,l/2).

Odometry log (JSON lines)::

    {"format": "fidslam-odometry/1"}
    {"time": 0.1, "body": "rig", "position": [...], "rotation": [...], "noise": [6 sigmas]}

``position``/``rotation`` are the body motion ``T(prev)^-1 T(time)``, i.e. the
pose at ``time`` expressed in the body frame of the previous frame. ``time``
must equal the timestamp of the frame the motion ends at.

Trajectory (text): ``# fidslam-trajectory/1`` then ``timestamp tx ty tz qx qy qz qw``.
Tag map (YAML): ``format: fidslam-tagmap/1`` plus a ``tags`` list usable as scene priors.
Diagnostics (CSV): ``time,factor_kind,camera,tag,body,error,verdict,rotations``.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .errors import ParseError, ValidationError
from .scene import PosePrior, Scene, TagSpec
from .se3 import Pose

DETECTIONS_FORMAT = "fidslam-detections/1"
ODOMETRY_FORMAT = "fidslam-odometry/1"
TRAJECTORY_FORMAT = "fidslam-trajectory/1"
TAGMAP_FORMAT = "fidslam-tagmap/1"
DIAG_COLUMNS = ("time", "factor_kind", "camera", "tag", "body", "error", "verdict", "rotations")


@dataclass
class Detection:
    tag_id: int
    corners: np.ndarray  # (4, 2) pixels


@dataclass
class DetectionFrame:
    time: float
    cameras: dict = field(default_factory=dict)  # camera name -> list[Detection]

    def validate(self):
        if not math.isfinite(self.time):
            raise ValidationError("timestamp must be finite", "time")
        for cam, dets in self.cameras.items():
            seen = set()
            for i, d in enumerate(dets):
                path = f"cameras.{cam}[{i}]"
                if d.tag_id in seen:
                    raise ValidationError(f"tag {d.tag_id} detected twice", path)
                seen.add(d.tag_id)
                c = np.asarray(d.corners, dtype=float)
                if c.shape != (4, 2) or not np.all(np.isfinite(c)):
                    raise ValidationError("corners must be 4x2 finite pixels", path)


@dataclass
class OdometrySample:
    time: float
    body: str
    delta: Pose  # body(t-1) -> body(t)
    noise: tuple


# ------------------------------------------------------------------ helpers


def _read_lines(source) -> list[str]:
    if isinstance(source, (str, Path)) and "\n" not in str(source):
        try:
            text = Path(source).read_text()
        except OSError as exc:
            raise ParseError(f"cannot read {source}: {exc}") from None
    else:
        text = source
    return [ln for ln in text.splitlines() if ln.strip()]


def _jsonl(source, fmt: str) -> list[dict]:
    lines = _read_lines(source)
    if not lines:
        raise ParseError(f"empty log, expected a {fmt} header")
    records = []
    for n, ln in enumerate(lines, 1):
        try:
            records.append(json.loads(ln))
        except json.JSONDecodeError as exc:
            raise ParseError(f"line {n}: {exc}") from None
    head = records[0]
    if not isinstance(head, dict) or head.get("format") != fmt:
        raise ValidationError(f"expected header {{\"format\": \"{fmt}\"}}", "line 1")
    return records[1:]


def fmt_number(x: float) -> str:
    """Fixed 9 decimals with trailing zeros removed; ``-0`` prints as ``0``."""
    s = f"{x:.9f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


# --------------------------------------------------------------- detections


def parse_detections(source) -> list[DetectionFrame]:
    frames = []
    for i, rec in enumerate(_jsonl(source, DETECTIONS_FORMAT)):
        path = f"line {i + 2}"
        if not isinstance(rec, dict) or "time" not in rec:
            raise ValidationError("frame record needs a time", path)
        cams = {}
        for cam, dets in (rec.get("cameras") or {}).items():
            if not isinstance(dets, list):
                raise ValidationError(f"camera {cam}: expected a list", path)
            try:
                cams[str(cam)] = [Detection(int(d["tag"]), np.asarray(d["corners"], dtype=float))
                                  for d in dets]
            except (KeyError, TypeError, ValueError) as exc:
                raise ValidationError(f"bad detection ({exc})", path) from None
        frame = DetectionFrame(float(rec["time"]), cams)
        try:
            frame.validate()
        except ValidationError as exc:
            raise ValidationError(str(exc), path) from None
        frames.append(frame)
    return frames


def dump_detections(frames) -> str:
    out = [json.dumps({"format": DETECTIONS_FORMAT})]
    for fr in frames:
        cams = {cam: [{"tag": d.tag_id, "corners": np.asarray(d.corners).tolist()} for d in dets]
                for cam, dets in fr.cameras.items()}
        out.append(json.dumps({"time": fr.time, "cameras": cams}))
    return "\n".join(out) + "\n"


# ----------------------------------------------------------------- odometry


def parse_odometry(source) -> list[OdometrySample]:
    samples = []
    for i, rec in enumerate(_jsonl(source, ODOMETRY_FORMAT)):
        path = f"line {i + 2}"
        try:
            pose = Pose(rec["rotation"], rec["position"])
            noise = tuple(float(s) for s in rec["noise"])
            samples.append(OdometrySample(float(rec["time"]), str(rec["body"]), pose, noise))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"bad odometry record ({exc})", path) from None
        if len(noise) != 6 or not all(s > 0 for s in noise):
            raise ValidationError("noise must be six positive sigmas", path)
    return samples


def dump_odometry(samples) -> str:
    out = [json.dumps({"format": ODOMETRY_FORMAT})]
    for s in samples:
        out.append(json.dumps({"time": s.time, "body": s.body, "position": s.delta.t.tolist(),
                               "rotation": s.delta.q.tolist(), "noise": list(s.noise)}))
    return "\n".join(out) + "\n"


# --------------------------------------------------------------- trajectory


def format_trajectory(rows) -> str:
    """``rows``: iterable of (timestamp, Pose)."""
    out = [f"# {TRAJECTORY_FORMAT} timestamp tx ty tz qx qy qz qw"]
    for stamp, pose in rows:
        vals = " ".join(fmt_number(v) for v in (*pose.t, *pose.q))
        out.append(f"{stamp:.9f} {vals}")
    return "\n".join(out) + "\n"


def parse_trajectory(source) -> list[tuple[float, Pose]]:
    rows = []
    for ln in _read_lines(source):
        if ln.startswith("#"):
            continue
        v = [float(x) for x in ln.split()]
        if len(v) != 8:
            raise ParseError(f"trajectory line needs 8 values: {ln!r}")
        rows.append((v[0], Pose(v[4:8], v[1:4])))
    return rows


# ------------------------------------------------------------------ tag map


# exported sigma for discovered tags (rad x3, m x3); mapping accuracy is ~1 cm
DISCOVERED_TAG_NOISE = (0.01,) * 6


def format_tag_map(entries) -> str:
    """``entries``: iterable of (TagSpec, Pose, source) with source prior|discovered."""
    tags = []
    for spec, pose, source in entries:
        noise = spec.prior.noise if spec.prior is not None else DISCOVERED_TAG_NOISE
        tags.append({
            "id": spec.id, "body": spec.body, "size": spec.size, "source": source,
            "prior": {"position": [float(v) for v in pose.t], "rotation": [float(v) for v in pose.q],
                      "noise": list(noise)},
        })
    return yaml.safe_dump({"format": TAGMAP_FORMAT, "tags": tags}, sort_keys=False)


def parse_tag_map(source) -> list[dict]:
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source):
        source = Path(source).read_text()
    try:
        doc = yaml.safe_load(source)
    except yaml.YAMLError as exc:
        raise ParseError(f"malformed tag map: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != TAGMAP_FORMAT:
        raise ValidationError(f"expected format {TAGMAP_FORMAT}", "format")
    return doc.get("tags") or []


def apply_tag_map(scene: Scene, source) -> Scene:
    """Scene whose tags carry the mapped poses as priors."""
    tags = dict(scene.tags)
    for i, t in enumerate(parse_tag_map(source)):
        if t["body"] not in scene.bodies:
            raise ValidationError(f"unknown body {t['body']!r}", f"tags[{i}].body")
        p = t["prior"]
        prior = PosePrior(Pose(p["rotation"], p["position"]), tuple(p["noise"]))
        old = tags.get(t["id"])
        if old is not None:
            tags[t["id"]] = replace(old, prior=prior)
        else:
            tags[t["id"]] = TagSpec(int(t["id"]), float(t["size"]), t["body"], prior)
    return replace(scene, tags=tags)


# -------------------------------------------------------------- diagnostics


def format_diagnostics(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DIAG_COLUMNS)
    for r in records:
        w.writerow([f"{r.time:.9f}", r.factor_kind, r.camera, r.tag, r.body,
                    "nan" if not math.isfinite(r.error) else f"{r.error:.6g}", r.verdict, r.rotations])
    return buf.getvalue()


def parse_diagnostics(source) -> list[dict]:
    text = Path(source).read_text() if isinstance(source, Path) else source
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and tuple(rows[0].keys()) != DIAG_COLUMNS:
        raise ValidationError("unexpected diagnostics columns", "header")
    return rows


def rejection_onset(rows) -> tuple[str, list[str]] | None:
    """First time with a rejected row and the tags first observed at that time.

    A displaced prior or a mis-sized tag usually shows up as the first
    rejection at the frame where the faulty tag enters the graph.
    """
    seen = set()
    for time, group in itertools.groupby(rows, key=lambda r: r["time"]):
        at = list(group)
        tags = {r["tag"] for r in at if r["tag"]}
        if any(r["verdict"] == "rejected" for r in at):
            return time, sorted(tags - seen, key=lambda t: (len(t), t))
        seen |= tags
    return None
