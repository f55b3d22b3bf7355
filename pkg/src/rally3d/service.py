"""HTTP service exposing the pipeline: calibrate, segment, reconstruct, bench.

Thin FastAPI layer over the same orchestration functions the CLI uses.
Request/response bodies mirror the file formats one to one.
"""

from __future__ import annotations

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import fileio
from .calib import CalibConfig
from .camgeom import CalibratedCamera, Intrinsics, Pose
from .cli import _seg_config, run_calibrate, run_reconstruct, run_segment
from .errors import Rally3DError
from .physics import PhysParams
from .synthbench import NoiseModel, VIEW_NAMES, format_report, run_benchmark

app = FastAPI(
    title="rally3d",
    description="3D ball-trajectory reconstruction from monocular detections",
)


class DetectionBody(BaseModel):
    frame: int
    t: float
    u: float
    v: float
    blur_angle: float | None = None
    blur_length: float | None = None


class KeypointFrameBody(BaseModel):
    frame: int
    t: float
    points: dict[str, tuple[float, float]]


class CameraBody(BaseModel):
    f: float
    width: int
    height: int
    R: list[float] = Field(min_length=9, max_length=9)
    T: list[float] = Field(min_length=3, max_length=3)
    reprojection_rmse: float = 0.0

    @classmethod
    def from_camera(cls, cam: CalibratedCamera) -> "CameraBody":
        return cls(
            f=cam.intrinsics.f,
            width=cam.intrinsics.width,
            height=cam.intrinsics.height,
            R=[float(x) for x in cam.pose.R.ravel()],
            T=[float(x) for x in cam.pose.T],
            reprojection_rmse=cam.reprojection_rmse,
        )

    def to_camera(self) -> CalibratedCamera:
        return CalibratedCamera(
            intrinsics=Intrinsics(f=self.f, width=self.width, height=self.height),
            pose=Pose(
                R=np.array(self.R, dtype=np.float64).reshape(3, 3),
                T=np.array(self.T, dtype=np.float64),
            ),
            reprojection_rmse=self.reprojection_rmse,
        )


class CalibrateRequest(BaseModel):
    frames: list[KeypointFrameBody]
    f0: float = 1500.0
    width: int = 1280
    height: int = 720


class CalibrateFrameResult(BaseModel):
    frame: int
    t: float
    camera: CameraBody | None


class CalibrateResponse(BaseModel):
    frames: list[CalibrateFrameResult]
    n_valid: int


class SegmentRequest(BaseModel):
    detections: list[DetectionBody]
    no_blur: bool = False


class SegmentBody(BaseModel):
    start_idx: int
    end_idx: int
    coeff_u: list[float]
    coeff_v: list[float]
    fit_cost: float


class EventBody(BaseModel):
    kind: str | None
    t_star: float
    u: float
    v: float
    left_segment: int
    right_segment: int
    low_confidence: bool


class SegmentResponse(BaseModel):
    segments: list[SegmentBody]
    events: list[EventBody]


class ReconstructRequest(BaseModel):
    detections: list[DetectionBody]
    camera: CameraBody
    physics: str = "tabletennis"
    no_blur: bool = False


class BounceBody(BaseModel):
    t_star: float
    X_bounce: list[float]
    v_minus: list[float]
    omega_minus: list[float]
    v_plus: list[float]
    omega_plus: list[float]
    reproj_rmse: float
    iterations: int
    converged: bool
    success: bool
    n_pre: int
    n_post: int


class ReconstructResponse(BaseModel):
    bounces: list[BounceBody]
    failures: list[str]


class NoiseBody(BaseModel):
    sigma_p: float = 0.0
    sigma_theta: float = 0.0
    sigma_l: float = 0.0
    seed: int = 0


class BenchRequest(BaseModel):
    views: list[str] = list(VIEW_NAMES)
    n_trajectories: int = 10
    seed: int = 0
    noise: NoiseBody = NoiseBody()
    calibration: str = "known"
    fps: float = 25.0
    physics: str = "tabletennis"


class ViewSummaryBody(BaseModel):
    view: str
    n_trajectories: int
    n_success: int
    success_rate: float
    mae_cm: float | None


class BenchResponse(BaseModel):
    views: list[ViewSummaryBody]
    formatted: str
    seed: int


def _bad_request(exc: Exception) -> HTTPException:
    return HTTPException(
        status_code=400, detail={"error": type(exc).__name__, "message": str(exc)}
    )


@app.get("/health")
def health() -> dict:
    return {"status": "ok"}


@app.post("/calibrate", response_model=CalibrateResponse)
def calibrate(req: CalibrateRequest) -> CalibrateResponse:
    frames = [f.model_dump() for f in req.frames]
    try:
        cfg = CalibConfig(f0=req.f0, width=req.width, height=req.height)
        entries, n_valid = run_calibrate(frames, cfg)
    except (Rally3DError, ValueError) as exc:
        raise _bad_request(exc)
    return CalibrateResponse(
        frames=[
            CalibrateFrameResult(
                frame=f,
                t=t,
                camera=None if cam is None else CameraBody.from_camera(cam),
            )
            for f, t, cam in entries
        ],
        n_valid=n_valid,
    )


def _to_track(detections: list[DetectionBody]):
    return [fileio.record_to_detection(d.model_dump()) for d in detections]


@app.post("/segment", response_model=SegmentResponse)
def segment(req: SegmentRequest) -> SegmentResponse:
    track = _to_track(req.detections)
    try:
        cfg = _seg_config(track, None, req.no_blur)
        segments, events = run_segment(track, cfg)
    except (Rally3DError, ValueError) as exc:
        raise _bad_request(exc)
    return SegmentResponse(
        segments=[
            SegmentBody(
                start_idx=s.start_idx,
                end_idx=s.end_idx,
                coeff_u=[float(c) for c in s.coeff_u],
                coeff_v=[float(c) for c in s.coeff_v],
                fit_cost=s.fit_cost,
            )
            for s in segments
        ],
        events=[
            EventBody(
                kind=e.kind,
                t_star=e.t_star,
                u=float(e.image_point[0]),
                v=float(e.image_point[1]),
                left_segment=e.left_segment,
                right_segment=e.right_segment,
                low_confidence=e.low_confidence,
            )
            for e in events
        ],
    )


@app.post("/reconstruct", response_model=ReconstructResponse)
def reconstruct(req: ReconstructRequest) -> ReconstructResponse:
    track = _to_track(req.detections)
    try:
        params = PhysParams.preset(req.physics)
        cam = req.camera.to_camera()
        cfg = _seg_config(track, None, req.no_blur)
        _, _, recons = run_reconstruct(track, cam, cfg, params)
    except (Rally3DError, ValueError) as exc:
        raise _bad_request(exc)
    done = [r for r in recons if r.result is not None]
    if not done and recons:
        raise HTTPException(
            status_code=422,
            detail={
                "error": "NoBounceReconstructed",
                "message": "; ".join(str(r.error) for r in recons if r.error),
            },
        )
    if not recons:
        raise HTTPException(
            status_code=422,
            detail={"error": "NoTableBounce", "message": "no table bounce event"},
        )
    return ReconstructResponse(
        bounces=[BounceBody(**fileio.result_to_record(r)) for r in done],
        failures=[str(r.error) for r in recons if r.error is not None],
    )


@app.post("/bench", response_model=BenchResponse)
def bench(req: BenchRequest) -> BenchResponse:
    try:
        noise = NoiseModel(**req.noise.model_dump())
        report = run_benchmark(
            views=tuple(req.views),
            noise=noise,
            n_trajectories=req.n_trajectories,
            seed=req.seed,
            params=PhysParams.preset(req.physics),
            calibration=req.calibration,
            fps=req.fps,
        )
    except (Rally3DError, ValueError) as exc:
        raise _bad_request(exc)
    return BenchResponse(
        views=[
            ViewSummaryBody(
                view=v.view,
                n_trajectories=v.n_trajectories,
                n_success=v.n_success,
                success_rate=v.success_rate,
                mae_cm=v.mae_cm,
            )
            for v in report.views
        ],
        formatted=format_report(report),
        seed=report.seed,
    )
