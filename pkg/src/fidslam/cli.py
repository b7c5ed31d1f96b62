"""Command line entry point: ``fidslam solve | simulate | diag``.

Exit codes: 0 success, 2 invalid input, 3 pipeline failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from .errors import FidSlamError, ParseError, ValidationError
from .fileio import (apply_tag_map, parse_detections, parse_diagnostics, parse_odometry, parse_tag_map,
                     rejection_onset)
from .pipeline import Pipeline, frame_time_stats
from .scene import load_scene, validate_solvability

EXIT_OK, EXIT_INVALID, EXIT_PIPELINE = 0, 2, 3
log = logging.getLogger("fidslam")


def _solve(args) -> int:
    try:
        scene = load_scene(Path(args.scene))
        if args.tag_map:
            scene = apply_tag_map(scene, Path(args.tag_map))
        if args.ambiguity_rule:
            scene = scene.with_settings(ambiguity_rule=args.ambiguity_rule)
        frames = parse_detections(Path(args.detections))
        odometry = parse_odometry(Path(args.odometry)) if args.odometry else []
    except (ParseError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    for w in validate_solvability(scene):
        log.warning(w)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        pipe = Pipeline(scene, window=args.window)
        pipe.run(frames, odometry)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FidSlamError as exc:
        print(f"pipeline error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE

    written = []
    trajectories = {}
    for body in scene.bodies.values():
        if body.is_static:
            continue
        try:
            trajectories[body.name] = pipe.trajectory(body.name)
        except FidSlamError:
            continue
        p = out / f"trajectory_{body.name}.txt"
        p.write_text(pipe.export_trajectory(body.name))
        written.append(p)
    for name, text in (("tag_map.yaml", pipe.export_tag_map()),
                       ("diagnostics.csv", pipe.export_diagnostics())):
        (out / name).write_text(text)
        written.append(out / name)

    verdicts = {}
    for r in pipe.diagnostics:
        verdicts[r.verdict] = verdicts.get(r.verdict, 0) + 1
    stats = frame_time_stats(pipe)
    summary = {"frames": len(frames), "determined_poses": {b: len(t) for b, t in trajectories.items()},
               "tags": len(pipe.tag_map()), "verdicts": verdicts, "total_error": pipe.total_error(),
               "seconds": stats.get("total", 0.0)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    written.append(out / "summary.json")

    if not args.no_plots:
        from .plotting import plot_factor_errors, plot_trajectory

        tags = {spec.id: (pose, src) for spec, pose, src in pipe.tag_map()}
        for body, rows in trajectories.items():
            written.append(plot_trajectory(out / f"trajectory_{body}.png", [p for _, p in rows], tags=tags,
                                           title=f"{body} trajectory"))
        written.append(plot_factor_errors(out / "factor_errors.png",
                                          parse_diagnostics(pipe.export_diagnostics())))

    print("key\tvalue")
    print(f"frames\t{len(frames)}")
    for b, rows in trajectories.items():
        print(f"poses[{b}]\t{len(rows)}")
    print(f"tags\t{summary['tags']}")
    for v in sorted(verdicts):
        print(f"factors[{v}]\t{verdicts[v]}")
    print(f"total_error\t{summary['total_error']:.6g}")
    for p in written:
        print(f"file\t{p}")
    return EXIT_OK


def _simulate(args) -> int:
    from .sim import spec_from_doc, write_simulation

    try:
        text = Path(args.spec).read_text()
        spec = spec_from_doc(text)
    except OSError as exc:
        print(f"error: cannot read {args.spec}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (FidSlamError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    paths = write_simulation(spec, args.out_dir)
    print("key\tvalue")
    print(f"frames\t{len(spec.times)}")
    print(f"tags\t{len(spec.truth.tags)}")
    for p in paths.values():
        print(f"file\t{p}")
    return EXIT_OK


def _diag(args) -> int:
    run = Path(args.run)
    path = run / "diagnostics.csv" if run.is_dir() else run
    try:
        rows = parse_diagnostics(path.read_text())
    except OSError as exc:
        print(f"error: cannot read {path}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    counts = {}
    for r in rows:
        counts[r["verdict"]] = counts.get(r["verdict"], 0) + 1
    print(f"{len(rows)} factor records: " + ", ".join(f"{k} {v}" for k, v in sorted(counts.items())))
    rejected = [r for r in rows if r["verdict"] == "rejected"]
    shown = rejected if rejected else rows

    def err(r):
        e = float(r["error"])
        return e if math.isfinite(e) else -1.0

    worst = sorted(shown, key=err, reverse=True)[: args.top]
    if worst:
        print("\nlargest errors" + (" among rejected factors" if rejected else "") + ":")
        header = ("time", "factor_kind", "camera", "tag", "body", "error", "verdict", "rotations")
        widths = [max(len(h), *(len(str(r[h])) for r in worst)) for h in header]
        print("  ".join(h.ljust(w) for h, w in zip(header, widths)))
        for r in worst:
            print("  ".join(str(r[h]).ljust(w) for h, w in zip(header, widths)))
    by_tag = {}
    for r in rejected:
        if r["tag"]:
            by_tag[r["tag"]] = by_tag.get(r["tag"], 0) + 1
    if by_tag:
        print("\nrejected observations per tag: " +
              ", ".join(f"{t}: {n}" for t, n in sorted(by_tag.items(), key=lambda kv: -kv[1])))
    onset = rejection_onset(rows)
    if onset is not None:
        time, tags = onset
        print(f"\nfirst rejection at t={time}; tags first observed there: {', '.join(tags) or 'none'}")
    tag_map = run / "tag_map.yaml" if run.is_dir() else None
    if tag_map is not None and tag_map.exists():
        tags = parse_tag_map(tag_map)
        print(f"\n{len(tags)} tags mapped ({sum(t['source'] == 'discovered' for t in tags)} discovered)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fidslam", description="Fiducial-marker SLAM on detection logs.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="solve a detection log")
    s.add_argument("--scene", required=True)
    s.add_argument("--detections", required=True)
    s.add_argument("--odometry")
    s.add_argument("--window", type=int, default=None, help="sliding window in frames (default: unbounded)")
    s.add_argument("--out-dir", default="fidslam_out")
    s.add_argument("--tag-map", help="tag map from an earlier run, loaded as tag priors")
    s.add_argument("--ambiguity-rule", choices=("decisive", "literal"))
    s.add_argument("--no-plots", action="store_true")
    s.set_defaults(func=_solve)

    m = sub.add_parser("simulate", help="render a synthetic scenario")
    m.add_argument("--spec", required=True)
    m.add_argument("--out-dir", required=True)
    m.set_defaults(func=_simulate)

    d = sub.add_parser("diag", help="summarize diagnostics of a solve run")
    d.add_argument("--run", required=True)
    d.add_argument("--top", type=int, default=10)
    d.set_defaults(func=_diag)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
