"""Camera calibration from table keypoints.

Estimates pose at fixed focal length (planar PnP: homography
initialization + damped Gauss-Newton), then recovers the focal length by
a 1-D search minimizing the summed reprojection error E(f), where each
candidate f re-solves the pose. Also provides corner-order
disambiguation and a Kalman tracker for moving/zooming cameras.

The table is 180-degree rotationally symmetric, so corner orderings that
differ by a half-turn (cyclic shift of 2) produce identical geometry;
corner identity is only recoverable modulo that symmetry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.spatial.transform import Rotation

from .camgeom import CalibratedCamera, Intrinsics, Pose, TableModel
from .errors import (
    DegenerateConfiguration,
    EmptyStream,
    ImplausiblePose,
    NoConvergence,
    NoPlausibleOrdering,
)

CORNER_LABELS = ("corner0", "corner1", "corner2", "corner3")
MIDLINE_LABELS = ("midline_front", "midline_back")

#: Mahalanobis gate for a 7-dim innovation, chi^2(7) at 0.999
INNOVATION_GATE = 24.32


@dataclass
class Correspondence:
    """One 3D table feature and its observed pixel position."""

    world: np.ndarray
    image: np.ndarray
    label: str = ""

    def __post_init__(self):
        self.world = np.asarray(self.world, dtype=np.float64).reshape(3)
        self.image = np.asarray(self.image, dtype=np.float64).reshape(2)
        if not (np.all(np.isfinite(self.world)) and np.all(np.isfinite(self.image))):
            raise ValueError("correspondence must be finite")


@dataclass
class CalibConfig:
    f0: float = 1500.0
    epsilon: float = 1e-3  # px, convergence threshold on E
    max_iters: int = 50
    f_min: float = 500.0
    f_max: float = 5000.0
    width: int = 1280
    height: int = 720
    # sanity bound on the camera-to-table distance; the tighter 10 m
    # broadcast-geometry gate is applied during corner disambiguation
    max_camera_distance: float = 50.0

    def __post_init__(self):
        if not (self.f_min < self.f0 < self.f_max):
            raise ValueError("need f_min < f0 < f_max")
        if self.max_iters < 1 or self.epsilon <= 0:
            raise ValueError("need max_iters >= 1 and epsilon > 0")


def _stack(corrs):
    world = np.array([c.world for c in corrs])
    image = np.array([c.image for c in corrs])
    return world, image


def reprojection_residuals(
    intrinsics: Intrinsics, pose: Pose, corrs
) -> np.ndarray:
    """Signed pixel residuals (N, 2): projection minus observation."""
    world, image = _stack(corrs)
    Xc = world @ pose.R.T + pose.T
    z = Xc[:, 2]
    if np.any(z <= 0):
        return np.full_like(image, np.inf)
    proj = np.column_stack(
        (
            intrinsics.cx + intrinsics.f * Xc[:, 0] / z,
            intrinsics.cy + intrinsics.f * Xc[:, 1] / z,
        )
    )
    return proj - image


def total_reprojection_error(intrinsics, pose, corrs) -> float:
    """Summed per-point reprojection distance E = sum_i |x_i - proj_i|."""
    res = reprojection_residuals(intrinsics, pose, corrs)
    return float(np.sum(np.linalg.norm(res, axis=1)))


def reprojection_rmse(intrinsics, pose, corrs) -> float:
    res = reprojection_residuals(intrinsics, pose, corrs)
    return float(np.sqrt(np.mean(res**2)))


def _orthonormalize(M: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(M)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        R = U @ np.diag([1.0, 1.0, -1.0]) @ Vt
    return R


def _normalizing_similarity(pts: np.ndarray) -> np.ndarray:
    """Hartley normalization: centroid to origin, mean distance sqrt(2)."""
    centroid = pts.mean(axis=0)
    d = np.mean(np.linalg.norm(pts - centroid, axis=1))
    s = math.sqrt(2.0) / max(d, 1e-12)
    T = np.array(
        [[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]]
    )
    return T


def _homography_dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Plane-to-image homography from >=4 point pairs (normalized DLT)."""
    Ts, Td = _normalizing_similarity(src), _normalizing_similarity(dst)
    sh = np.column_stack((src, np.ones(len(src)))) @ Ts.T
    dh = np.column_stack((dst, np.ones(len(dst)))) @ Td.T
    rows = []
    for (x, y, w), (u, v, m) in zip(sh, dh):
        rows.append([0, 0, 0, -m * x, -m * y, -m * w, v * x, v * y, v * w])
        rows.append([m * x, m * y, m * w, 0, 0, 0, -u * x, -u * y, -u * w])
    A = np.array(rows)
    _, s, Vt = np.linalg.svd(A)
    if s[-2] < 1e-12 * s[0]:
        raise DegenerateConfiguration("homography system is rank deficient")
    H = Vt[-1].reshape(3, 3)
    return np.linalg.inv(Td) @ H @ Ts


def _pose_from_plane_homography(K: np.ndarray, world: np.ndarray, image: np.ndarray):
    """Initial pose for coplanar world points (shared z = z0)."""
    z0 = float(world[0, 2])
    H = _homography_dlt(world[:, :2], image)
    M = np.linalg.inv(K) @ H
    scale = 2.0 / (np.linalg.norm(M[:, 0]) + np.linalg.norm(M[:, 1]))
    if M[2, 2] * scale < 0:  # table origin must sit in front of the camera
        scale = -scale
    r1 = scale * M[:, 0]
    r2 = scale * M[:, 1]
    R = _orthonormalize(np.column_stack((r1, r2, np.cross(r1, r2))))
    T = scale * M[:, 2] - z0 * R[:, 2]
    return R, T


def _pose_from_dlt_general(K: np.ndarray, world: np.ndarray, image: np.ndarray):
    """Initial pose for >=6 general-position points (3x4 DLT)."""
    rows = []
    for X, x in zip(world, image):
        Xh = np.append(X, 1.0)
        rows.append(np.concatenate([Xh, np.zeros(4), -x[0] * Xh]))
        rows.append(np.concatenate([np.zeros(4), Xh, -x[1] * Xh]))
    _, _, Vt = np.linalg.svd(np.array(rows))
    P = Vt[-1].reshape(3, 4)
    M = np.linalg.inv(K) @ P
    scale = 1.0 / np.linalg.norm(M[2, :3])
    depth = (M[:3, :3] @ world.mean(axis=0) + M[:, 3])[2] * scale
    if depth < 0:
        scale = -scale
    R = _orthonormalize(scale * M[:, :3])
    T = scale * M[:, 3]
    return R, T


def _refine_pose(K, world, image, R, T, max_iters=80):
    """Damped Gauss-Newton on (R, T) minimizing squared reprojection error."""
    f = K[0, 0]
    cx, cy = K[0, 2], K[1, 2]

    def residual(Rc, Tc):
        Xc = world @ Rc.T + Tc
        if np.any(Xc[:, 2] <= 1e-9):
            return None, None
        u = cx + f * Xc[:, 0] / Xc[:, 2]
        v = cy + f * Xc[:, 1] / Xc[:, 2]
        return np.column_stack((u, v)) - image, Xc

    r, Xc = residual(R, T)
    if r is None:
        raise DegenerateConfiguration("initial pose places points behind camera")
    cost = float(np.sum(r**2))
    lam = 1e-6
    converged = False
    for _ in range(max_iters):
        # J rows per point: d(proj)/d[omega, T]; left-multiplied rotation
        # increment R <- exp([omega]x) R gives dXc/domega = -[R X]x
        n = len(world)
        J = np.zeros((2 * n, 6))
        for i in range(n):
            x, y, z = Xc[i]
            A = np.array([[f / z, 0.0, -f * x / z**2], [0.0, f / z, -f * y / z**2]])
            RX = Xc[i] - T
            skew = np.array(
                [[0, -RX[2], RX[1]], [RX[2], 0, -RX[0]], [-RX[1], RX[0], 0]]
            )
            J[2 * i : 2 * i + 2, :3] = A @ (-skew)
            J[2 * i : 2 * i + 2, 3:] = A
        g = J.T @ r.ravel()
        JtJ = J.T @ J
        step_ok = False
        for _ in range(12):
            try:
                delta = np.linalg.solve(JtJ + lam * np.diag(np.diag(JtJ) + 1e-12), -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            R_new = Rotation.from_rotvec(delta[:3]).as_matrix() @ R
            T_new = T + delta[3:]
            r_new, Xc_new = residual(R_new, T_new)
            if r_new is not None and float(np.sum(r_new**2)) < cost:
                step_ok = True
                break
            lam *= 10
        if not step_ok:
            converged = True  # damping exhausted: at a (local) minimum
            break
        new_cost = float(np.sum(r_new**2))
        R, T, r, Xc = R_new, T_new, r_new, Xc_new
        lam = max(lam * 0.3, 1e-12)
        if np.linalg.norm(delta) < 1e-12 or cost - new_cost < 1e-14 * (cost + 1e-30):
            cost = new_cost
            converged = True
            break
        cost = new_cost
    return _orthonormalize(R), T, converged, cost


def solve_pnp_fixed_f(
    corrs, f: float, cfg: CalibConfig | None = None, init: Pose | None = None
) -> Pose:
    """Camera pose from >=4 correspondences at a known focal length."""
    if cfg is None:
        cfg = CalibConfig()
    if len(corrs) < 4:
        raise DegenerateConfiguration(f"need >= 4 correspondences, got {len(corrs)}")
    world, image = _stack(corrs)

    centered = image - image.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[1] < 1e-9 * max(sv[0], 1.0):
        raise DegenerateConfiguration("image points are collinear")

    intr = Intrinsics(f=f, width=cfg.width, height=cfg.height)
    K = intr.K
    if init is not None:
        R0, T0 = init.R, init.T
    else:
        wc = world - world.mean(axis=0)
        planar = np.linalg.svd(wc, compute_uv=False)[2] < 1e-9
        if planar and np.ptp(world[:, 2]) < 1e-12:
            R0, T0 = _pose_from_plane_homography(K, world, image)
        elif len(corrs) >= 6 and not planar:
            R0, T0 = _pose_from_dlt_general(K, world, image)
        else:
            raise DegenerateConfiguration(
                "no initialization available: points neither lie on a z-plane "
                "nor form a >=6-point general configuration"
            )
        init_res = reprojection_residuals(intr, Pose(R=_orthonormalize(R0), T=T0), corrs)
        init_cost = float(np.sum(init_res**2))

    R, T, converged, cost = _refine_pose(K, world, image, R0, T0)
    if not converged and init is None and cost > init_cost:
        raise NoConvergence("pose refinement failed to improve initialization")
    return Pose(R=R, T=T)


def estimate_focal(
    corrs, cfg: CalibConfig | None = None, return_history: bool = False
):
    """Joint focal length and pose estimate.

    Minimizes the profile objective E(f) = sum_i |x_i - proj(f, pose*(f))|
    where pose*(f) re-solves the fixed-f PnP (warm-started from the best
    pose so far): a coarse geometric sweep brackets the minimum, then a
    bounded golden-section/parabolic search refines it. The recorded
    E history contains every accepted improvement and is non-increasing
    by construction.
    """
    if cfg is None:
        cfg = CalibConfig()
    intr_of = lambda f: Intrinsics(f=f, width=cfg.width, height=cfg.height)

    best = {"E": math.inf, "f": cfg.f0, "pose": None}
    history: list[float] = []

    def profile(f: float) -> float:
        f = float(np.clip(f, cfg.f_min, cfg.f_max))
        try:
            pose = solve_pnp_fixed_f(corrs, f, cfg, init=best["pose"])
        except (NoConvergence, DegenerateConfiguration):
            if best["pose"] is None:
                raise
            return math.inf
        E = total_reprojection_error(intr_of(f), pose, corrs)
        if E < best["E"]:
            best.update(E=E, f=f, pose=pose)
            history.append(E)
        return E

    profile(cfg.f0)
    grid = np.geomspace(cfg.f_min, cfg.f_max, 14)
    energies = [profile(f) for f in grid]
    i = int(np.argmin(energies))
    lo = grid[max(i - 1, 0)]
    hi = grid[min(i + 1, len(grid) - 1)]
    minimize_scalar(
        profile,
        bounds=(lo, hi),
        method="bounded",
        options={"xatol": 0.02, "maxiter": cfg.max_iters},
    )
    if not lo < best["f"] < hi:
        # incumbent (usually the f0 start) beat the grid bracket: polish it
        f_c = best["f"]
        minimize_scalar(
            profile,
            bounds=(max(cfg.f_min, 0.98 * f_c), min(cfg.f_max, 1.02 * f_c)),
            method="bounded",
            options={"xatol": 0.02, "maxiter": cfg.max_iters},
        )

    f_best, pose = best["f"], best["pose"]
    dist = np.linalg.norm(pose.camera_center)
    if dist > cfg.max_camera_distance:
        # the f/T_z ambiguity can legitimately slide the optimum far out
        # when the table is tiny in the image; callers treat this as an
        # unusable frame rather than receiving a boundary-hugging pose
        raise ImplausiblePose(
            f"camera center {dist:.1f} m from table exceeds "
            f"{cfg.max_camera_distance:.0f} m bound"
        )

    intr = intr_of(f_best)
    cam = CalibratedCamera(
        intrinsics=intr,
        pose=pose,
        reprojection_rmse=reprojection_rmse(intr, pose, corrs),
    )
    if return_history:
        return cam, history
    return cam


def is_plausible(
    cam: CalibratedCamera, table: TableModel, max_distance: float = 10.0
) -> bool:
    """Broadcast-geometry gate: near the table and above its plane."""
    C = cam.pose.camera_center
    return bool(np.linalg.norm(C) < max_distance and C[2] > table.height)


def disambiguate_corners(
    corners: np.ndarray, table: TableModel | None = None, cfg: CalibConfig | None = None
):
    """Resolve which detected corner is which table corner.

    Tries the cyclic orderings in both traversal directions, calibrates
    each, gates on plausibility, and keeps the lowest-error candidate.
    Orderings that differ by a half-turn are geometrically equivalent
    (table symmetry), so they are collapsed into one class; if two
    non-equivalent classes fit comparably well the input is ambiguous.
    """
    if table is None:
        table = TableModel()
    if cfg is None:
        cfg = CalibConfig()
    corners = np.asarray(corners, dtype=np.float64).reshape(4, 2)
    if len(np.unique(corners.round(9), axis=0)) < 4:
        raise NoPlausibleOrdering("corner pixels are not distinct")

    candidates = []  # (E, shift, direction, ordering, cam)
    for direction in (1, -1):
        pts = corners if direction == 1 else corners[::-1]
        for shift in range(4):
            order = np.roll(pts, -shift, axis=0)
            corrs = [
                Correspondence(world=w, image=p, label=lab)
                for w, p, lab in zip(table.corners, order, CORNER_LABELS)
            ]
            try:
                cam = estimate_focal(corrs, cfg)
            except (NoConvergence, DegenerateConfiguration, ImplausiblePose):
                continue
            if not is_plausible(cam, table):
                continue
            E = total_reprojection_error(cam.intrinsics, cam.pose, corrs)
            candidates.append((E, shift, direction, order, cam, corrs))

    if not candidates:
        raise NoPlausibleOrdering("no corner ordering yields a plausible camera")

    candidates.sort(key=lambda c: c[0])
    E_best, shift_best, dir_best = candidates[0][:3]
    for E, shift, direction, *_ in candidates[1:]:
        equivalent = direction == dir_best and (shift - shift_best) % 2 == 0
        if not equivalent and E < 3.0 * E_best + 1e-6:
            raise NoPlausibleOrdering(
                "two incompatible corner orderings fit equally well "
                f"(E = {E_best:.3g} vs {E:.3g} px)"
            )
    _, _, _, order, cam, corrs = candidates[0]
    return corrs, cam


@dataclass
class TrackerTuning:
    """Kalman noise settings; focal terms scale with the current f."""

    process_sigma_f_frac: float = 0.004
    process_sigma_rot: float = 0.002  # rad / frame
    process_sigma_T: float = 0.01  # m / frame
    meas_sigma_f_frac: float = 0.10
    meas_sigma_rot: float = 0.05
    meas_sigma_T: float = 0.3
    gate: float = INNOVATION_GATE


class CameraTracker:
    """Constant-position Kalman filter over [f, rotation, T].

    Rotation lives on the manifold: the state holds a reference R that is
    corrected by exp of the filtered axis-angle increment after each
    update. Measurements whose innovation fails the Mahalanobis gate are
    rejected and the prediction is carried forward. Single-owner object:
    calls must be sequential.
    """

    def __init__(self, tuning: TrackerTuning | None = None):
        self.tuning = tuning or TrackerTuning()
        self.initialized = False
        self.last_accepted = False
        self.f = None
        self.R = None
        self.T = None
        self.P = None
        self._intr = None
        self._rmse = 0.0

    def _camera(self) -> CalibratedCamera:
        intr = Intrinsics(
            f=self.f, width=self._intr.width, height=self._intr.height,
            cx=self._intr.cx, cy=self._intr.cy,
        )
        return CalibratedCamera(
            intrinsics=intr,
            pose=Pose(R=_orthonormalize(self.R), T=self.T.copy()),
            reprojection_rmse=self._rmse,
        )

    def update(self, t: float, cam: CalibratedCamera | None) -> CalibratedCamera | None:
        tn = self.tuning
        if not self.initialized:
            if cam is None:
                self.last_accepted = False
                return None
            self.f = cam.intrinsics.f
            self.R = cam.pose.R.copy()
            self.T = cam.pose.T.copy()
            self._intr = cam.intrinsics
            self._rmse = cam.reprojection_rmse
            self.P = np.diag(
                [
                    (tn.meas_sigma_f_frac * self.f) ** 2,
                    *([tn.meas_sigma_rot**2] * 3),
                    *([tn.meas_sigma_T**2] * 3),
                ]
            )
            self.initialized = True
            self.last_accepted = True
            return cam

        Q = np.diag(
            [
                (tn.process_sigma_f_frac * self.f) ** 2,
                *([tn.process_sigma_rot**2] * 3),
                *([tn.process_sigma_T**2] * 3),
            ]
        )
        self.P = self.P + Q
        if cam is None:
            self.last_accepted = False
            return self._camera()

        Rm = np.diag(
            [
                (tn.meas_sigma_f_frac * self.f) ** 2,
                *([tn.meas_sigma_rot**2] * 3),
                *([tn.meas_sigma_T**2] * 3),
            ]
        )
        y = np.concatenate(
            [
                [cam.intrinsics.f - self.f],
                Rotation.from_matrix(cam.pose.R @ self.R.T).as_rotvec(),
                cam.pose.T - self.T,
            ]
        )
        S = self.P + Rm
        if float(y @ np.linalg.solve(S, y)) > tn.gate:
            self.last_accepted = False
            return self._camera()

        K = np.linalg.solve(S.T, self.P.T).T  # P S^-1
        delta = K @ y
        self.f = self.f + delta[0]
        self.R = Rotation.from_rotvec(delta[1:4]).as_matrix() @ self.R
        self.T = self.T + delta[4:]
        self.P = (np.eye(7) - K) @ self.P
        self.P = 0.5 * (self.P + self.P.T)
        self._rmse = cam.reprojection_rmse
        self.last_accepted = True
        return self._camera()


def track_camera(stream) -> list[CalibratedCamera | None]:
    """Filter a sequence of (timestamp, CalibratedCamera | None) pairs.

    Returns one entry per input frame: the filtered camera, or None for
    frames before the first valid calibration. Failed frames (None) after
    initialization receive the carried-forward prediction.
    """
    stream = list(stream)
    if not stream:
        raise EmptyStream("no frames in calibration stream")
    t_prev = -math.inf
    tracker = CameraTracker()
    out = []
    for t, cam in stream:
        if t <= t_prev:
            raise ValueError("timestamps must be strictly increasing")
        t_prev = t
        out.append(tracker.update(t, cam))
    if not tracker.initialized:
        raise EmptyStream("no valid calibration in stream")
    return out
