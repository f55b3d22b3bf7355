"""Command-line pipeline: calibrate, segment, reconstruct, bench, plot, serve.

Each subcommand is a thin wrapper over an orchestration function that
the HTTP service reuses in-process. Exit codes are a stable contract:
0 success, 2 input error, 3 empty or degenerate result.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import fileio
from .calib import CalibConfig, Correspondence, estimate_focal, track_camera
from .camgeom import CalibratedCamera, TableModel
from .errors import EmptyStream, FileFormatError, Rally3DError
from .physics import PhysParams
from .rallyseg import SegConfig, classify_events, detect_events, segment_rally
from .recon import reconstruct_rally
from .synthbench import NoiseModel, VIEW_NAMES, format_report, run_benchmark

log = logging.getLogger("rally3d")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_EMPTY = 3


# -- orchestration (shared with the HTTP service) ------------------------


def _frame_correspondences(points: dict, table: TableModel) -> list[Correspondence]:
    world = {lab: w for lab, w in zip(fileio.FEATURE_LABELS, table.features)}
    corrs = []
    for label, px in points.items():
        if label not in world:
            raise ValueError(f"unknown feature label {label!r}")
        corrs.append(Correspondence(world=world[label], image=px, label=label))
    if len(corrs) < 4:
        raise ValueError(f"need at least 4 labeled features, got {len(corrs)}")
    return corrs


def run_calibrate(frames: list[dict], cfg: CalibConfig, table: TableModel | None = None):
    """Per-frame focal estimation plus temporal filtering.

    Returns (entries, n_valid) where entries are (frame, t, camera|None)
    ready for the calibration-stream writer. Frames that cannot be
    calibrated are logged and carried by the filter, not fatal.
    """
    if table is None:
        table = TableModel()
    if not frames:
        raise EmptyStream("no keypoint frames")
    raw = []
    n_valid = 0
    for fr in frames:
        cam = None
        try:
            cam = estimate_focal(_frame_correspondences(fr["points"], table), cfg)
            n_valid += 1
        except (Rally3DError, ValueError) as exc:
            log.warning("frame %s: calibration failed: %s", fr["frame"], exc)
        raw.append((fr["frame"], fr["t"], cam))
    filtered = track_camera((t, cam) for _, t, cam in raw)
    entries = [(f, t, fc) for (f, t, _), fc in zip(raw, filtered)]
    return entries, n_valid


def _seg_config(track, blur_weight: float | None, no_blur: bool, **kw) -> SegConfig:
    cfg_kw = dict(kw)
    if blur_weight is not None:
        cfg_kw["blur_weight"] = blur_weight
    cfg = SegConfig(**cfg_kw)
    if no_blur:
        cfg.blur_weight = 0.0
    elif all(d.blur_angle is None for d in track):
        log.warning("detections carry no blur data; blur term disabled")
        cfg.blur_weight = 0.0
    return cfg


def run_segment(track, cfg: SegConfig):
    """Split a track into arcs and locate (unclassified) contact events."""
    segments = segment_rally(track, cfg)
    events = detect_events(track, segments, cfg)
    return segments, events


def run_reconstruct(
    track,
    cam: CalibratedCamera,
    cfg: SegConfig,
    params: PhysParams,
    table: TableModel | None = None,
):
    """Full pipeline on one track: segment, classify, reconstruct."""
    if table is None:
        table = TableModel()
    segments = segment_rally(track, cfg)
    events = classify_events(
        segments, detect_events(track, segments, cfg), cam, table, params
    )
    recons = reconstruct_rally(track, segments, events, cam, params, table)
    return segments, events, recons


# -- small helpers --------------------------------------------------------


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FileFormatError(f"config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise FileFormatError(f"config {path}: expected a JSON object")
    return cfg


def _noise_from(cfg: dict, name: str | None, seed: int) -> NoiseModel:
    if "noise" in cfg:
        return NoiseModel(**cfg["noise"])
    if name in (None, "none"):
        return NoiseModel.none(seed=seed)
    if name == "standard":
        return NoiseModel.standard(seed=seed)
    raise ValueError(f"unknown noise level {name!r}")


def _physics(cfg: dict, flag: str | None) -> PhysParams:
    return PhysParams.preset(flag or cfg.get("physics", "tabletennis"))


def _input_error(msg: str) -> int:
    log.error("%s", msg)
    print(f"error: {msg}", file=sys.stderr)
    return EXIT_INPUT


def _empty_error(msg: str) -> int:
    log.warning("%s", msg)
    print(f"error: {msg}", file=sys.stderr)
    return EXIT_EMPTY


# -- subcommands -----------------------------------------------------------


def cmd_calibrate(args) -> int:
    try:
        cfg_dict = _load_config(args.config)
        frames = fileio.read_keypoints(args.keypoints)
    except (OSError, FileFormatError) as exc:
        return _input_error(str(exc))
    calib_kw = cfg_dict.get("calib", {})
    try:
        cfg = CalibConfig(**calib_kw)
    except (TypeError, ValueError) as exc:
        return _input_error(f"bad calib config: {exc}")
    if not frames:
        return _input_error(f"{args.keypoints}: no keypoint frames")
    try:
        entries, n_valid = run_calibrate(frames, cfg)
    except EmptyStream as exc:
        return _empty_error(str(exc))
    fileio.write_calibration_stream(args.out, entries)
    log.info("calibrated %d/%d frames -> %s", n_valid, len(frames), args.out)
    return EXIT_OK


def cmd_segment(args) -> int:
    try:
        cfg_dict = _load_config(args.config)
        track = fileio.read_detections(args.detections)
    except (OSError, FileFormatError) as exc:
        return _input_error(str(exc))
    if not track:
        return _input_error(f"{args.detections}: no detections")
    try:
        cfg = _seg_config(track, None, args.no_blur, **cfg_dict.get("segmentation", {}))
        segments, events = run_segment(track, cfg)
    except (TypeError, ValueError) as exc:
        return _input_error(str(exc))
    except Rally3DError as exc:
        return _empty_error(str(exc))
    fileio.write_segmentation(args.out, segments, events)
    log.info("%d segments, %d events -> %s", len(segments), len(events), args.out)
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    try:
        cfg_dict = _load_config(args.config)
        track = fileio.read_detections(args.detections)
        stream = fileio.read_calibration_stream(args.calibration)
    except (OSError, FileFormatError) as exc:
        return _input_error(str(exc))
    if not track:
        return _input_error(f"{args.detections}: no detections")
    try:
        params = _physics(cfg_dict, args.physics)
        cfg = _seg_config(track, None, args.no_blur, **cfg_dict.get("segmentation", {}))
        t_mid = track[len(track) // 2].t
        cam = fileio.camera_nearest(stream, t_mid)
    except (TypeError, ValueError, FileFormatError) as exc:
        return _input_error(str(exc))
    try:
        _, _, recons = run_reconstruct(track, cam, cfg, params)
    except Rally3DError as exc:
        return _empty_error(str(exc))
    done = [r for r in recons if r.result is not None]
    for r in recons:
        if r.error is not None:
            log.warning(
                "bounce at t=%.3f failed: %s", r.event.t_star, r.error
            )
    if not done:
        return _empty_error("no table bounce could be reconstructed")
    fileio.write_records(args.out, (fileio.result_to_record(r) for r in done))
    if args.traj_dir:
        out_dir = Path(args.traj_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for i, r in enumerate(done):
            fileio.write_trajectory_csv(
                out_dir / f"bounce_{i:02d}.csv", r.result.trajectory
            )
    if args.svg:
        from .plotting import save_svg

        trajectories = [
            np.array([s.p for s in r.result.trajectory]) for r in done
        ]
        save_svg(args.svg, trajectories)
    log.info("%d bounce(s) -> %s", len(done), args.out)
    return EXIT_OK


def cmd_bench(args) -> int:
    try:
        cfg_dict = _load_config(args.config)
        noise = _noise_from(cfg_dict, args.noise, args.seed)
        params = _physics(cfg_dict, args.physics)
        views = tuple(args.views.split(",")) if args.views else VIEW_NAMES
        report = run_benchmark(
            views=views,
            noise=noise,
            n_trajectories=args.n,
            seed=args.seed,
            params=params,
            calibration=args.calibration,
            fps=args.fps,
            jobs=args.jobs,
        )
    except (TypeError, ValueError, FileFormatError) as exc:
        return _input_error(str(exc))
    print(format_report(report))
    if args.out:
        fileio.write_report(args.out, report)
    if args.csv:
        fileio.write_report_csv(args.csv, report)
    return EXIT_OK


def cmd_plot(args) -> int:
    from .plotting import save_svg

    trajectories = []
    try:
        for path in args.traj:
            rows = fileio.read_trajectory_csv(path)
            trajectories.append(np.array([p for _, p, _ in rows]))
    except (OSError, FileFormatError) as exc:
        return _input_error(str(exc))
    if not any(len(t) for t in trajectories):
        return _empty_error("no trajectory points to plot")
    save_svg(args.out, trajectories)
    log.info("%d trajectories -> %s", len(trajectories), args.out)
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import app

    uvicorn.run(app, host=args.host, port=args.port)
    return EXIT_OK


# -- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="rally3d",
        description="3D ball-trajectory reconstruction from monocular detections",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file", default=None)

    sp = sub.add_parser("calibrate", help="camera from table keypoints")
    common(sp)
    sp.add_argument("--keypoints", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_calibrate)

    sp = sub.add_parser("segment", help="split a track into parabolic arcs")
    common(sp)
    sp.add_argument("--detections", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--no-blur", action="store_true")
    sp.set_defaults(fn=cmd_segment)

    sp = sub.add_parser("reconstruct", help="3D bounce states from a track")
    common(sp)
    sp.add_argument("--detections", required=True)
    sp.add_argument("--calibration", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--traj-dir", default=None, help="write per-bounce CSVs here")
    sp.add_argument("--svg", default=None, help="write trajectory plot here")
    sp.add_argument(
        "--physics", choices=["tabletennis", "tennis-grass", "tennis-clay"]
    )
    sp.add_argument("--no-blur", action="store_true")
    sp.set_defaults(fn=cmd_reconstruct)

    sp = sub.add_parser("bench", help="synthetic end-to-end benchmark")
    common(sp)
    sp.add_argument("--views", default=None, help="comma-separated view names")
    sp.add_argument("--n", type=int, default=130)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--noise", choices=["none", "standard"], default="none")
    sp.add_argument(
        "--calibration", choices=["known", "estimated"], default="known"
    )
    sp.add_argument("--fps", type=float, default=25.0)
    sp.add_argument("--jobs", type=int, default=os.cpu_count())
    sp.add_argument(
        "--physics", choices=["tabletennis", "tennis-grass", "tennis-clay"]
    )
    sp.add_argument("--out", default=None, help="write the report here")
    sp.add_argument("--csv", default=None, help="write per-trajectory rows here")
    sp.set_defaults(fn=cmd_bench)

    sp = sub.add_parser("plot", help="SVG plot of trajectory CSVs")
    sp.add_argument("--traj", nargs="+", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_plot)

    sp = sub.add_parser("serve", help="run the HTTP service")
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=8000)
    sp.set_defaults(fn=cmd_serve)
    return p


def main(argv=None) -> int:
    level = os.environ.get("RALLY3D_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
