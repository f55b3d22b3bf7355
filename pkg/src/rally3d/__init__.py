"""Monocular 3D ball-trajectory reconstruction for table tennis."""

from .calib import CalibConfig, Correspondence, estimate_focal, is_plausible, track_camera
from .camgeom import CalibratedCamera, Intrinsics, Pose, TableModel
from .physics import (
    BallState,
    BounceOutcome,
    PhysParams,
    apply_bounce,
    find_plane_crossing,
    integrate_flight,
)
from .rallyseg import (
    Detection,
    Event,
    SegConfig,
    Segment,
    classify_events,
    detect_events,
    segment_rally,
)
from .recon import (
    BounceAnchor,
    BounceReconstruction,
    ReconProblem,
    ReconResult,
    bounce_anchor,
    predict_observations,
    predict_positions,
    reconstruct,
    reconstruct_rally,
)
from .synthbench import (
    EvalReport,
    GroundTruthRally,
    NoiseModel,
    ShotPlan,
    Strike,
    ViewPreset,
    draw_trajectory,
    format_report,
    generate_rally,
    render_track,
    run_benchmark,
    view_preset,
)

__version__ = "0.1.0"

__all__ = [
    "BallState",
    "BounceAnchor",
    "BounceOutcome",
    "BounceReconstruction",
    "CalibConfig",
    "CalibratedCamera",
    "Correspondence",
    "Detection",
    "EvalReport",
    "Event",
    "GroundTruthRally",
    "Intrinsics",
    "NoiseModel",
    "PhysParams",
    "Pose",
    "ReconProblem",
    "ReconResult",
    "SegConfig",
    "Segment",
    "ShotPlan",
    "Strike",
    "TableModel",
    "ViewPreset",
    "apply_bounce",
    "bounce_anchor",
    "classify_events",
    "detect_events",
    "draw_trajectory",
    "estimate_focal",
    "find_plane_crossing",
    "format_report",
    "generate_rally",
    "integrate_flight",
    "is_plausible",
    "predict_observations",
    "predict_positions",
    "reconstruct",
    "reconstruct_rally",
    "render_track",
    "run_benchmark",
    "segment_rally",
    "track_camera",
    "view_preset",
    "__version__",
]
