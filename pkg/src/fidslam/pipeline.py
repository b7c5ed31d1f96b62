"""Frame loop: turn detections and odometry into factors and run the initializer."""

from __future__ import annotations

import logging
import math
import time as _time
from dataclasses import dataclass

import numpy as np

from .camera import pixel_area
from .errors import NoPoses, OutOfOrderFrame, UnknownBody, ValidationError
from .factors import TAG, RelativePosePrior, TagProjection, body_key, camera_key, describe, tag_key
from .fileio import DetectionFrame, OdometrySample, format_diagnostics, format_tag_map, format_trajectory
from .initializer import TwoGraphState, factor_rows, process_new_factors, update_optimized
from .optimizer import OptimizerConfig, optimize
from .scene import Scene, resolve_tag

log = logging.getLogger(__name__)


@dataclass
class DiagnosticsRecord:
    time: float
    fid: int
    factor_kind: str
    camera: str
    tag: str
    body: str
    error: float
    verdict: str
    rotations: int


class Pipeline:
    """Sequential solver over detection frames.

    ``window=None`` re-optimizes the whole optimized graph after each accepted
    subgraph; ``window=W`` only moves the last ``W`` frames' dynamic poses and
    static poses determined in the last ``W`` rounds.
    """

    def __init__(self, scene: Scene, window: int | None = None,
                 update_config: OptimizerConfig | None = None):
        if window is not None and window < 1:
            raise ValidationError("window must be at least 1", "window")
        self.scene = scene
        self.window = window
        kw = {} if update_config is None else {"update_config": update_config}
        self.state = TwoGraphState(scene, window=window, **kw)
        self.timestamps: list[float] = []
        self.diagnostics: list[DiagnosticsRecord] = []
        self.reports = []
        self.frame_seconds: list[float] = []
        self.tag_specs = {t.id: t for t in scene.tags.values()}

    # ---------------------------------------------------------- factor build

    def _odometry_factors(self, idx: int, samples) -> list:
        out = []
        for s in samples:
            body = self.scene.bodies.get(s.body)
            if body is None:
                raise ValidationError(f"unknown body {s.body!r}", "odometry")
            if body.is_static:
                raise ValidationError(f"odometry for static body {s.body!r}", "odometry")
            if idx == 0:
                log.warning("odometry at the first frame has no predecessor; ignored")
                continue
            out.append(RelativePosePrior(self.state.new_fid(), body_key(s.body, idx),
                                         body_key(s.body, idx - 1), s.delta, tuple(s.noise)))
        return out

    def _body_var(self, name: str, idx: int):
        return body_key(name) if self.scene.bodies[name].is_static else body_key(name, idx)

    def _projection_factors(self, idx: int, frame: DetectionFrame) -> list:
        out = []
        sigma = self.scene.settings.pixel_noise
        for cam_name in sorted(frame.cameras):
            cam = self.scene.cameras.get(cam_name)
            if cam is None:
                raise ValidationError(f"camera {cam_name!r} is not in the scene", f"frame {idx}")
            for d in sorted(frame.cameras[cam_name], key=lambda d: d.tag_id):
                spec = resolve_tag(self.scene, d.tag_id)
                if spec is None:
                    continue
                self.tag_specs.setdefault(spec.id, spec)
                corners = np.asarray(d.corners, dtype=float).reshape(4, 2)
                corners.setflags(write=False)
                out.append(TagProjection(
                    fid=self.state.new_fid(), body=self._body_var(spec.body, idx),
                    cam=camera_key(cam_name), tag=tag_key(spec.id), rig=self._body_var(cam.rig, idx),
                    corners=corners, camera=cam_name, tag_id=spec.id, tag_size=spec.size,
                    sigma_p=sigma, intrinsics=cam.intrinsics, time=idx, body_name=spec.body,
                    area=pixel_area(corners)))
        return out

    # ------------------------------------------------------------ frame loop

    def ingest_frame(self, frame: DetectionFrame, odometry=()):
        if self.timestamps and not frame.time > self.timestamps[-1]:
            raise OutOfOrderFrame(f"frame time {frame.time} does not follow {self.timestamps[-1]}")
        frame.validate()
        start = _time.perf_counter()
        idx = len(self.timestamps)
        new = self._odometry_factors(idx, odometry) + self._projection_factors(idx, frame)
        self.timestamps.append(frame.time)
        report = process_new_factors(self.state, new, time=idx)
        self.reports.append(report)
        for f, err, verdict, rot in factor_rows(report):
            d = describe(f)
            self.diagnostics.append(DiagnosticsRecord(frame.time, f.fid, d["factor_kind"], d["camera"],
                                                      d["tag"], d["body"], err, verdict, rot))
        self.frame_seconds.append(_time.perf_counter() - start)
        return report

    def run(self, frames, odometry=()):
        """Process a whole log. Odometry samples are matched to frames by timestamp."""
        by_time: dict = {}
        for s in odometry:
            by_time.setdefault(s.time, []).append(s)
        stamps = {fr.time for fr in frames}
        for t in by_time:
            if t not in stamps:
                raise ValidationError(f"odometry sample at {t} matches no frame", "odometry")
        for fr in frames:
            self.ingest_frame(fr, by_time.get(fr.time, ()))
        return self.finish()

    def finish(self, cfg: OptimizerConfig | None = None):
        """Optimize the optimized graph to convergence (skipped in windowed mode)."""
        if self.window is not None or not self.state.optimized.factors:
            return None
        return optimize(self.state.optimized, cfg or OptimizerConfig(max_iterations=200))

    # --------------------------------------------------------------- exports

    def trajectory(self, body: str) -> list:
        b = self.scene.bodies.get(body)
        if b is None or b.is_static:
            raise UnknownBody(f"{body!r} is not a dynamic body of the scene")
        values = self.state.optimized.values
        rows = [(self.timestamps[i], values[body_key(body, i)])
                for i in range(len(self.timestamps)) if body_key(body, i) in values]
        if not rows:
            raise NoPoses(f"body {body!r} has no determined poses")
        return rows

    def export_trajectory(self, body: str) -> str:
        return format_trajectory(self.trajectory(body))

    def tag_map(self) -> list:
        """Tags with at least one accepted observation, with their source."""
        opt = self.state.optimized
        out = []
        for tid in sorted(self.tag_specs):
            k = tag_key(tid)
            if k in opt.values and any(f.kind == "projection" for f in opt.factors_of(k)):
                spec = self.tag_specs[tid]
                out.append((spec, opt.values[k], "prior" if spec.prior is not None else "discovered"))
        return out

    def export_tag_map(self) -> str:
        return format_tag_map(self.tag_map())

    def export_diagnostics(self) -> str:
        return format_diagnostics(self.diagnostics)

    def total_error(self) -> float:
        return self.state.optimized.total_error()

    def discovered_tags(self) -> list:
        return [k for k in self.state.optimized.values if k.kind == TAG]


def frame_time_stats(p: Pipeline) -> dict:
    s = np.asarray(p.frame_seconds)
    if not s.size:
        return {"frames": 0, "median": math.nan, "max": math.nan}
    return {"frames": int(s.size), "median": float(np.median(s)), "max": float(s.max()),
            "total": float(s.sum())}


__all__ = ["Pipeline", "DiagnosticsRecord", "OdometrySample", "DetectionFrame", "frame_time_stats",
           "update_optimized"]
