"""Line-oriented file formats for the pipeline artifacts.

Every format is JSON records (one object per line, sorted keys) or CSV.
Floats are serialized in shortest round-trip form, so reading a file
and writing it back reproduces it byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .camgeom import CalibratedCamera, Intrinsics, Pose
from .errors import FileFormatError
from .rallyseg import Detection, Event, Segment
from .synthbench import EvalReport, NoiseModel, TrajectoryRecord, ViewSummary


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _floats(x) -> list[float]:
    return [float(v) for v in np.asarray(x).ravel()]


def write_records(path, records) -> None:
    text = "".join(_canonical(rec) + "\n" for rec in records)
    Path(path).write_text(text)


def read_records(path) -> list[dict]:
    out = []
    for i, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FileFormatError(f"{path}:{i}: not a JSON record: {exc}") from exc
        if not isinstance(rec, dict):
            raise FileFormatError(f"{path}:{i}: expected a JSON object")
        out.append(rec)
    return out


# -- detections ---------------------------------------------------------


def detection_to_record(d: Detection) -> dict:
    return {
        "frame": int(d.frame),
        "t": float(d.t),
        "u": float(d.u),
        "v": float(d.v),
        "blur_angle": None if d.blur_angle is None else float(d.blur_angle),
        "blur_length": None if d.blur_length is None else float(d.blur_length),
    }


def record_to_detection(rec: dict) -> Detection:
    try:
        blur_angle = rec.get("blur_angle")
        blur_length = rec.get("blur_length")
        return Detection(
            frame=int(rec["frame"]),
            t=float(rec["t"]),
            u=float(rec["u"]),
            v=float(rec["v"]),
            blur_angle=None if blur_angle is None else float(blur_angle),
            blur_length=None if blur_length is None else float(blur_length),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FileFormatError(f"bad detection record: {exc}") from exc


def write_detections(path, track) -> None:
    write_records(path, (detection_to_record(d) for d in track))


def read_detections(path) -> list[Detection]:
    return [record_to_detection(rec) for rec in read_records(path)]


# -- keypoints (table features per frame) -------------------------------

FEATURE_LABELS = ("c0", "c1", "c2", "c3", "m0", "m1")


def keypoints_to_record(frame: int, t: float, points: dict) -> dict:
    return {
        "frame": int(frame),
        "t": float(t),
        "points": {str(k): _floats(v) for k, v in sorted(points.items())},
    }


def read_keypoints(path) -> list[dict]:
    """Keypoint frames: {"frame", "t", "points": {label: [u, v]}}."""
    frames = []
    for rec in read_records(path):
        try:
            frames.append(
                {
                    "frame": int(rec["frame"]),
                    "t": float(rec["t"]),
                    "points": {
                        str(k): [float(v[0]), float(v[1])]
                        for k, v in rec["points"].items()
                    },
                }
            )
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise FileFormatError(f"bad keypoint record: {exc}") from exc
    return frames


# -- calibration stream --------------------------------------------------


def camera_to_record(frame: int, t: float, cam: CalibratedCamera | None) -> dict:
    if cam is None:
        return {"frame": int(frame), "t": float(t), "camera": None}
    return {
        "frame": int(frame),
        "t": float(t),
        "camera": {
            "f": float(cam.intrinsics.f),
            "width": int(cam.intrinsics.width),
            "height": int(cam.intrinsics.height),
            "R": _floats(cam.pose.R),
            "T": _floats(cam.pose.T),
            "reprojection_rmse": float(cam.reprojection_rmse),
        },
    }


def record_to_camera(rec: dict) -> tuple[int, float, CalibratedCamera | None]:
    try:
        frame, t, body = int(rec["frame"]), float(rec["t"]), rec["camera"]
        if body is None:
            return frame, t, None
        cam = CalibratedCamera(
            intrinsics=Intrinsics(
                f=float(body["f"]),
                width=int(body["width"]),
                height=int(body["height"]),
            ),
            pose=Pose(
                R=np.array(body["R"], dtype=np.float64).reshape(3, 3),
                T=np.array(body["T"], dtype=np.float64).reshape(3),
            ),
            reprojection_rmse=float(body["reprojection_rmse"]),
        )
        return frame, t, cam
    except (KeyError, TypeError, ValueError) as exc:
        raise FileFormatError(f"bad calibration record: {exc}") from exc


def write_calibration_stream(path, entries) -> None:
    """entries: iterable of (frame, t, CalibratedCamera | None)."""
    write_records(path, (camera_to_record(f, t, c) for f, t, c in entries))


def read_calibration_stream(path) -> list[tuple[int, float, CalibratedCamera | None]]:
    return [record_to_camera(rec) for rec in read_records(path)]


def camera_nearest(stream, t: float) -> CalibratedCamera:
    """Calibrated camera of the stream entry nearest in time to t."""
    valid = [(abs(ft - t), cam) for _, ft, cam in stream if cam is not None]
    if not valid:
        raise FileFormatError("calibration stream holds no valid camera")
    return min(valid, key=lambda x: x[0])[1]


# -- segments and events --------------------------------------------------


def segment_to_record(seg: Segment) -> dict:
    return {
        "type": "segment",
        "start_idx": int(seg.start_idx),
        "end_idx": int(seg.end_idx),
        "coeff_u": _floats(seg.coeff_u),
        "coeff_v": _floats(seg.coeff_v),
        "fit_cost": float(seg.fit_cost),
    }


def event_to_record(ev: Event) -> dict:
    return {
        "type": "event",
        "kind": None if ev.kind is None else str(ev.kind),
        "t_star": float(ev.t_star),
        "u": float(ev.image_point[0]),
        "v": float(ev.image_point[1]),
        "left_segment": int(ev.left_segment),
        "right_segment": int(ev.right_segment),
        "low_confidence": bool(ev.low_confidence),
    }


def write_segmentation(path, segments, events) -> None:
    recs = [segment_to_record(s) for s in segments]
    recs += [event_to_record(e) for e in events]
    write_records(path, recs)


def read_segmentation(path) -> tuple[list[Segment], list[Event]]:
    segments, events = [], []
    for rec in read_records(path):
        kind = rec.get("type")
        try:
            if kind == "segment":
                segments.append(
                    Segment(
                        start_idx=int(rec["start_idx"]),
                        end_idx=int(rec["end_idx"]),
                        coeff_u=np.array(rec["coeff_u"], dtype=np.float64),
                        coeff_v=np.array(rec["coeff_v"], dtype=np.float64),
                        fit_cost=float(rec["fit_cost"]),
                    )
                )
            elif kind == "event":
                ev_kind = rec["kind"]
                events.append(
                    Event(
                        kind=None if ev_kind is None else str(ev_kind),
                        t_star=float(rec["t_star"]),
                        image_point=np.array(
                            [rec["u"], rec["v"]], dtype=np.float64
                        ),
                        left_segment=int(rec["left_segment"]),
                        right_segment=int(rec["right_segment"]),
                        low_confidence=bool(rec["low_confidence"]),
                    )
                )
            else:
                raise FileFormatError(f"unknown segmentation record type {kind!r}")
        except (KeyError, TypeError, ValueError) as exc:
            raise FileFormatError(f"bad segmentation record: {exc}") from exc
    return segments, events


# -- reconstruction results ----------------------------------------------


def result_to_record(rec) -> dict:
    """Serialize one successful BounceReconstruction."""
    res = rec.result
    return {
        "t_star": float(rec.event.t_star),
        "X_bounce": _floats(rec.anchor.X_bounce),
        "v_minus": _floats(res.v_minus),
        "omega_minus": _floats(res.omega_minus),
        "v_plus": _floats(res.v_plus),
        "omega_plus": _floats(res.omega_plus),
        "reproj_rmse": float(res.reproj_rmse),
        "iterations": int(res.iterations),
        "converged": bool(res.converged),
        "success": bool(res.success),
        "n_pre": len(rec.problem.pre_obs),
        "n_post": len(rec.problem.post_obs),
    }


def write_trajectory_csv(path, states) -> None:
    """CSV of ball states: t,x,y,z,vx,vy,vz with round-trip floats."""
    lines = ["t,x,y,z,vx,vy,vz"]
    for s in states:
        row = [s.t, *s.p, *s.v]
        lines.append(",".join(repr(float(x)) for x in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectory_csv(path):
    """Rows of the trajectory CSV as (t, p, v) float tuples."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "t,x,y,z,vx,vy,vz":
        raise FileFormatError(f"{path}: not a trajectory CSV")
    rows = []
    for i, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 7:
            raise FileFormatError(f"{path}:{i}: expected 7 columns")
        try:
            vals = [float(x) for x in parts]
        except ValueError as exc:
            raise FileFormatError(f"{path}:{i}: {exc}") from exc
        rows.append((vals[0], np.array(vals[1:4]), np.array(vals[4:7])))
    return rows


# -- benchmark reports ----------------------------------------------------


def write_report(path, report: EvalReport) -> None:
    head = {
        "type": "report",
        "n_trajectories": report.n_trajectories,
        "seed": report.seed,
        "calibration": report.calibration,
        "noise": asdict(report.noise),
    }
    views = [{"type": "view_summary", **asdict(v)} for v in report.views]
    records = [{"type": "trajectory", **asdict(r)} for r in report.records]
    write_records(path, [head, *views, *records])


def read_report(path) -> EvalReport:
    recs = read_records(path)
    if not recs or recs[0].get("type") != "report":
        raise FileFormatError(f"{path}: missing report header record")
    head = recs[0]
    try:
        views = [
            ViewSummary(**{k: v for k, v in r.items() if k != "type"})
            for r in recs
            if r.get("type") == "view_summary"
        ]
        records = [
            TrajectoryRecord(**{k: v for k, v in r.items() if k != "type"})
            for r in recs
            if r.get("type") == "trajectory"
        ]
        return EvalReport(
            views=views,
            records=records,
            n_trajectories=int(head["n_trajectories"]),
            noise=NoiseModel(**head["noise"]),
            calibration=str(head["calibration"]),
            seed=int(head["seed"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FileFormatError(f"bad report record: {exc}") from exc


def write_report_csv(path, report: EvalReport) -> None:
    lines = ["index,view,n_pre,n_post,converged,success,mae_cm,reproj_rmse_px,failure"]
    for r in report.records:
        lines.append(
            ",".join(
                [
                    str(r.index),
                    r.view,
                    str(r.n_pre),
                    str(r.n_post),
                    str(r.converged).lower(),
                    str(r.success).lower(),
                    "" if r.mae_cm is None else repr(float(r.mae_cm)),
                    "" if r.reproj_rmse_px is None else repr(float(r.reproj_rmse_px)),
                    "" if r.failure is None else r.failure,
                ]
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")
