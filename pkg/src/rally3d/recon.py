"""Per-bounce 3D state estimation from monocular ball observations.

The bounce is the one instant where the ball's 3D position is known
exactly: its center sits on the plane parallel to the table surface at
radius height linking the contact constraint to the calibrated
camera ray. That anchor removes position from the unknowns, so each
bounce reduces to a 6-dimensional problem: find the pre-bounce velocity
and spin whose physics rollout (backward through the air, through the
contact model, forward through the air) best reprojects onto the
observed pixel track.

The solver is damped Gauss-Newton on the stacked pixel residuals with
forward-difference Jacobians through the integrator. It is fully
deterministic: no random restarts, a fixed multi-start schedule on
failure.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .camgeom import (
    CalibratedCamera,
    TableModel,
    intersect_ray_plane,
    pixel_ray,
    project_points,
)
from .errors import (
    AnchorOutsideTable,
    BallMovingAway,
    IdentifiabilityWarning,
    NoConvergence,
    PlaneCrossing,
    Rally3DError,
    RayParallelToPlane,
    TooFewPoints,
)
from .physics import BallState, PhysParams, _rk4_step, apply_bounce, find_plane_crossing, integrate_flight
from .rallyseg import TABLE_BOUNCE, Detection, Event, Segment

DEFAULT_DT = 1.0 / 500.0
# step for rollouts inside the optimizer; against dt=1/500 the pixel
# discrepancy stays under 2e-6 px across the play envelope, far below
# anything the fit can resolve, at 2.5x fewer integrator calls
OPT_DT = 1.0 / 200.0
FD_STEP_VELOCITY = 1e-4  # m/s
FD_STEP_SPIN = 1e-2  # rad/s
MAX_ITERS = 200
PLATEAU_WINDOW = 25  # iterations without material improvement
PLATEAU_REL = 1e-4  # drop below this fraction does not reset the window
ANCHOR_MARGIN = 0.5  # m beyond the table edge before an anchor is rejected
SUCCESS_RMSE_PX = 10.0
# a fast drive legitimately lands 2-3 m past the table end, so the
# plausibility gate on the predicted second bounce is volume-scale; it
# exists to reject wild spin solutions, not long rebounds
SUCCESS_BOUNCE_MARGIN = 3.0  # m

# residual magnitudes standing in for states the projection cannot score
_PENALTY_BEHIND = 1.0e4
_PENALTY_NO_BOUNCE = 1.0e6


@dataclass
class BounceAnchor:
    """Ball-center position at a table bounce, with its event context."""

    X_bounce: np.ndarray
    t_star: float
    source_event: Event

    def __post_init__(self):
        self.X_bounce = np.asarray(self.X_bounce, dtype=np.float64).reshape(3)


@dataclass
class ReconProblem:
    """One bounce-centered estimation problem.

    ``pre_obs`` and ``post_obs`` are time-ordered detections strictly
    before and after the anchor time. Together they must contain at
    least 5 points, the floor below which the 6 unknowns are not
    identifiable.
    """

    camera: CalibratedCamera
    anchor: BounceAnchor
    pre_obs: list[Detection]
    post_obs: list[Detection]
    params: PhysParams = field(default_factory=PhysParams.table_tennis)
    init_v: np.ndarray | None = None
    init_omega: np.ndarray | None = None

    def __post_init__(self):
        if self.init_v is not None:
            self.init_v = np.asarray(self.init_v, dtype=np.float64).reshape(3)
        if self.init_omega is not None:
            self.init_omega = np.asarray(self.init_omega, dtype=np.float64).reshape(3)
        t_star = self.anchor.t_star
        if any(d.t >= t_star for d in self.pre_obs):
            raise ValueError("pre_obs must lie strictly before the anchor time")
        if any(d.t <= t_star for d in self.post_obs):
            raise ValueError("post_obs must lie strictly after the anchor time")
        n = len(self.pre_obs) + len(self.post_obs)
        if n < 5:
            raise TooFewPoints(f"need at least 5 observations around the bounce, got {n}")


@dataclass
class ReconResult:
    """Estimated bounce state and the fit diagnostics behind it."""

    v_minus: np.ndarray
    omega_minus: np.ndarray
    v_plus: np.ndarray
    omega_plus: np.ndarray
    trajectory: list[BallState]
    reproj_rmse: float
    converged: bool
    iterations: int
    cost_history: list[float]
    success: bool
    identifiability_warning: bool = False


def bounce_anchor(
    cam: CalibratedCamera,
    event: Event,
    table: TableModel | None = None,
    r: float = 0.02,
) -> BounceAnchor:
    """Intersect the bounce pixel's ray with the radius-offset table plane.

    The contact constraint holds for the ball center at height r above
    the surface, not on the surface itself; intersecting at surface
    height instead drags the anchor along the ray, badly so for low
    viewpoints.
    """
    if table is None:
        table = TableModel()
    if event.kind != TABLE_BOUNCE:
        raise ValueError(f"anchor requires a {TABLE_BOUNCE} event, got {event.kind!r}")
    ray = pixel_ray(cam, event.image_point[0], event.image_point[1])
    plane_point = table.plane_point + r * table.plane_normal
    X = intersect_ray_plane(ray, table.plane_normal, plane_point)
    if not table.contains_xy(X, margin=ANCHOR_MARGIN):
        raise AnchorOutsideTable(
            f"anchor ({X[0]:.3f}, {X[1]:.3f}) is more than {ANCHOR_MARGIN} m off the table"
        )
    return BounceAnchor(X_bounce=X, t_star=event.t_star, source_event=event)


def _march(p, v, omega, t, t_target, params, dt, surface_z):
    """Fixed-step RK4 from t to t_target (either direction), batched.

    With ``surface_z`` set, watches row 0 for a crossing of the plane
    z = surface_z + r and raises PlaneCrossing; None disables the check
    so the optimizer can integrate through the plane unharmed.
    """
    remaining = t_target - t
    if remaining == 0.0:
        return p, v
    h = math.copysign(dt, remaining)
    n_full = int(abs(remaining) / dt + 1e-12)
    for _ in range(n_full):
        p_new, v_new = _rk4_step(p, v, omega, h, params)
        if surface_z is not None:
            _check_crossing(p, p_new, t, t + h, params, surface_z)
        p, v, t = p_new, v_new, t + h
    h_last = t_target - t
    if abs(h_last) > 1e-12:
        p_new, v_new = _rk4_step(p, v, omega, h_last, params)
        if surface_z is not None:
            _check_crossing(p, p_new, t, t_target, params, surface_z)
        p, v = p_new, v_new
    return p, v


def _check_crossing(p_old, p_new, t_old, t_new, params, surface_z):
    h_old = p_old[0, 2] - params.r - surface_z
    h_new = p_new[0, 2] - params.r - surface_z
    if h_old > -1e-9 and h_new < -1e-9:
        raise PlaneCrossing(t_old, t_new)


def _predict_positions(
    anchor_p: np.ndarray,
    t_star: float,
    V: np.ndarray,
    W: np.ndarray,
    pre_times: list[float],
    post_times: list[float],
    params: PhysParams,
    dt: float,
    surface_z: float | None,
) -> tuple[np.ndarray, np.ndarray]:
    """Roll out B candidate states to every observation time.

    Returns (positions (B, N, 3), valid (B,)). Rows whose pre-bounce
    velocity cannot bounce (ball moving away from the table) are marked
    invalid and left at the anchor; the caller turns them into penalty
    residuals. When a crossing monitor is active (surface_z set) that
    situation raises instead of degrading silently.
    """
    B = V.shape[0]
    N = len(pre_times) + len(post_times)
    out = np.empty((B, N, 3))
    valid = np.ones(B, dtype=bool)
    if pre_times:
        p = np.repeat(anchor_p[None, :], B, axis=0)
        v = V.copy()
        t = t_star
        for slot in range(len(pre_times) - 1, -1, -1):
            p, v = _march(p, v, W, t, pre_times[slot], params, dt, surface_z)
            t = pre_times[slot]
            out[:, slot] = p
    if post_times:
        v_plus = np.empty_like(V)
        w_plus = np.empty_like(W)
        for b in range(B):
            try:
                outcome = apply_bounce(V[b], W[b], params)
            except BallMovingAway:
                if surface_z is not None:
                    raise
                valid[b] = False
                v_plus[b] = 0.0
                w_plus[b] = 0.0
                continue
            v_plus[b] = outcome.v_plus
            w_plus[b] = outcome.omega_plus
        p = np.repeat(anchor_p[None, :], B, axis=0)
        v = v_plus
        t = t_star
        base = len(pre_times)
        for slot in range(len(post_times)):
            p, v = _march(p, v, w_plus, t, post_times[slot], params, dt, surface_z)
            t = post_times[slot]
            out[:, base + slot] = p
    return out, valid


def predict_observations(
    problem: ReconProblem,
    v_minus: np.ndarray,
    omega_minus: np.ndarray,
    dt: float = DEFAULT_DT,
) -> np.ndarray:
    """Pixels the camera would see for a candidate pre-bounce state.

    Output rows follow pre_obs then post_obs order. Raises
    PlaneCrossing if the rollout re-crosses the table plane inside the
    observation window (a second bounce the model cannot represent) and
    PointBehindCamera if a predicted position falls behind the camera.
    """
    v = np.asarray(v_minus, dtype=np.float64).reshape(1, 3)
    w = np.asarray(omega_minus, dtype=np.float64).reshape(1, 3)
    surface_z = problem.anchor.X_bounce[2] - problem.params.r
    positions, _ = _predict_positions(
        problem.anchor.X_bounce,
        problem.anchor.t_star,
        v,
        w,
        [d.t for d in problem.pre_obs],
        [d.t for d in problem.post_obs],
        problem.params,
        dt,
        surface_z,
    )
    return project_points(problem.camera, positions[0])


def predict_positions(
    problem: ReconProblem,
    v_minus: np.ndarray,
    omega_minus: np.ndarray,
    dt: float = DEFAULT_DT,
    monitor_crossing: bool = True,
) -> np.ndarray:
    """World-frame ball centers at the observation timestamps.

    Same rollout as predict_observations without the projection, so it
    carries the same PlaneCrossing/BallMovingAway behavior. Rows follow
    pre_obs then post_obs order. With monitor_crossing=False the rollout
    is allowed to pass the anchor plane, which is what a caller scoring
    positions near the end of an arc wants: a fit whose descent crosses
    the plane a hair before the last observation should score badly
    there, not raise.
    """
    v = np.asarray(v_minus, dtype=np.float64).reshape(1, 3)
    w = np.asarray(omega_minus, dtype=np.float64).reshape(1, 3)
    surface_z = (
        problem.anchor.X_bounce[2] - problem.params.r if monitor_crossing else None
    )
    positions, _ = _predict_positions(
        problem.anchor.X_bounce,
        problem.anchor.t_star,
        v,
        w,
        [d.t for d in problem.pre_obs],
        [d.t for d in problem.post_obs],
        problem.params,
        dt,
        surface_z,
    )
    return positions[0]


def _residual_rows(problem, positions, valid, obs_px):
    """Stack per-row pixel residuals, substituting penalties where the
    rollout produced nothing projectable."""
    cam = problem.camera
    R, T = cam.pose.R, cam.pose.T
    B, N, _ = positions.shape
    rows = np.empty((B, 2 * N))
    f = cam.intrinsics.f
    cx, cy = cam.intrinsics.cx, cam.intrinsics.cy
    for b in range(B):
        if not valid[b]:
            rows[b] = _PENALTY_NO_BOUNCE
            continue
        Xc = positions[b] @ R.T + T
        z = Xc[:, 2]
        good = np.isfinite(z) & (z > 1e-9)
        res = np.full((N, 2), _PENALTY_BEHIND)
        res[good, 0] = f * Xc[good, 0] / z[good] + cx - obs_px[good, 0]
        res[good, 1] = f * Xc[good, 1] / z[good] + cy - obs_px[good, 1]
        res[~np.isfinite(res)] = _PENALTY_BEHIND
        rows[b] = res.ravel()
    return rows


def _evaluate(problem, theta, obs_px, pre_times, post_times, dt):
    """Residual vector for one candidate state, or None if unusable."""
    positions, valid = _predict_positions(
        problem.anchor.X_bounce,
        problem.anchor.t_star,
        theta[None, :3],
        theta[None, 3:],
        pre_times,
        post_times,
        problem.params,
        dt,
        None,
    )
    r = _residual_rows(problem, positions, valid, obs_px)[0]
    if not np.all(np.isfinite(r)):
        return None
    return r


_ALL_STATE = tuple(range(6))
_VELOCITY_ONLY = (0, 1, 2)


def _evaluate_with_jacobian(problem, theta, obs_px, pre_times, post_times, dt, active):
    """Residual and forward-difference Jacobian in one batched rollout.

    ``active`` selects which state components get a Jacobian column;
    the rest stay frozen at their current values.
    """
    steps_all = np.array([FD_STEP_VELOCITY] * 3 + [FD_STEP_SPIN] * 3)
    steps = steps_all[list(active)]
    thetas = np.repeat(theta[None, :], 1 + len(active), axis=0)
    for row, i in enumerate(active, start=1):
        thetas[row, i] += steps_all[i]
    positions, valid = _predict_positions(
        problem.anchor.X_bounce,
        problem.anchor.t_star,
        thetas[:, :3],
        thetas[:, 3:],
        pre_times,
        post_times,
        problem.params,
        dt,
        None,
    )
    rows = _residual_rows(problem, positions, valid, obs_px)
    r0 = rows[0]
    J = (rows[1:] - r0).T / steps
    return r0, J


def observation_jacobian(
    problem: ReconProblem,
    v_minus: np.ndarray,
    omega_minus: np.ndarray,
    dt: float = DEFAULT_DT,
) -> np.ndarray:
    """Forward-difference Jacobian of the predicted pixels.

    Shape (2N, 6): rows interleave (u, v) per observation, columns are
    the three velocity components then the three spin components, with
    the same per-variable steps the optimizer uses.
    """
    theta = np.concatenate(
        [
            np.asarray(v_minus, dtype=np.float64).reshape(3),
            np.asarray(omega_minus, dtype=np.float64).reshape(3),
        ]
    )
    obs_px = _observed_pixels(problem)
    pre_times = [d.t for d in problem.pre_obs]
    post_times = [d.t for d in problem.post_obs]
    _, J = _evaluate_with_jacobian(
        problem, theta, obs_px, pre_times, post_times, dt, _ALL_STATE
    )
    return J


def _observed_pixels(problem) -> np.ndarray:
    return np.array([[d.u, d.v] for d in problem.pre_obs + problem.post_obs])


def _default_init_velocity(problem: ReconProblem, table: TableModel) -> np.ndarray:
    """Longitudinal-sign heuristic for the standard (0, +/-5, -3) start.

    Back-projects the first and last observed pixels onto the bounce
    plane; the world-Y displacement between them fixes the sign of the
    initial longitudinal velocity.
    """
    dets = problem.pre_obs if len(problem.pre_obs) >= 2 else problem.post_obs
    plane_point = table.plane_point + problem.params.r * table.plane_normal
    try:
        ys = []
        for det in (dets[0], dets[-1]):
            ray = pixel_ray(problem.camera, det.u, det.v)
            X = intersect_ray_plane(ray, table.plane_normal, plane_point)
            ys.append(X[1])
        sign = 1.0 if ys[1] >= ys[0] else -1.0
    except RayParallelToPlane:
        sign = 1.0
    return np.array([0.0, 5.0 * sign, -3.0])


def _run_lm(problem, theta0, obs_px, pre_times, post_times, dt, max_iters, active):
    """Damped least squares over the ``active`` components from one start.

    Returns (theta, cost_history, iterations, converged). Iterations
    count every solved trial step, accepted or not.
    """
    active = list(active)
    theta = theta0.copy()
    r = _evaluate(problem, theta, obs_px, pre_times, post_times, dt)
    if r is None:
        return theta, [], 0, False
    cost = float(r @ r)
    history = [cost]
    lam = 1e-3
    iters = 0
    # a shallow valley (anchor quantization the state cannot absorb)
    # can keep yielding microscopic accepted drops for hundreds of
    # iterations; once a window of iterations brings no material
    # improvement the fit is converged for any downstream purpose
    anchor_cost = cost
    anchor_iter = 0
    converged = cost < 1e-20
    while not converged and iters < max_iters:
        _, J = _evaluate_with_jacobian(
            problem, theta, obs_px, pre_times, post_times, dt, active
        )
        g = J.T @ r
        JtJ = J.T @ J
        diag = np.maximum(np.diag(JtJ), 1e-12)
        accepted = False
        while iters < max_iters:
            iters += 1
            try:
                delta = np.linalg.solve(JtJ + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                delta = np.linalg.lstsq(JtJ + lam * np.diag(diag), -g, rcond=None)[0]
            step = float(np.max(np.abs(delta)))
            cand = theta.copy()
            cand[active] += delta
            r_new = _evaluate(problem, cand, obs_px, pre_times, post_times, dt)
            if r_new is not None:
                cost_new = float(r_new @ r_new)
                if cost_new < cost:
                    rel_drop = (cost - cost_new) / max(cost, 1e-30)
                    theta = cand
                    r, cost = r_new, cost_new
                    history.append(cost)
                    lam = max(lam / 3.0, 1e-12)
                    accepted = True
                    if cost < anchor_cost * (1.0 - PLATEAU_REL):
                        anchor_cost, anchor_iter = cost, iters
                    if rel_drop < 1e-12 or step < 1e-10 or cost < 1e-20:
                        converged = True
                    elif iters - anchor_iter >= PLATEAU_WINDOW:
                        converged = True
                    break
            # trial rejected: if steps have shrunk to nothing we are at
            # a (local) optimum to working precision
            if step < 1e-9:
                converged = True
                break
            if iters - anchor_iter >= PLATEAU_WINDOW:
                converged = True
                break
            lam *= 4.0
            if lam > 1e14:
                break
        if not accepted and not converged:
            break
    return theta, history, iters, converged


def reconstruct(
    problem: ReconProblem,
    table: TableModel | None = None,
    dt: float = DEFAULT_DT,
    max_iters: int = MAX_ITERS,
    opt_dt: float = OPT_DT,
    with_trajectory: bool = True,
) -> ReconResult:
    """Estimate the pre-bounce velocity and spin for one bounce.

    Minimizes the summed squared pixel error of the physics rollout
    over the 6-vector [v_minus, omega_minus]. Each start is solved in
    two stages: velocity only with the spin frozen, then all six
    components together. Velocity is strongly observable and spin is
    not, so the joint problem from a coarse start tends to fall into
    compensating-spin local minima that the staged solve avoids. On a
    failed start, retries the opposite longitudinal sign and two
    sidespin seeds; the objective is non-convex and these cover the
    common basins. Raises NoConvergence when every start fails.

    Optimizer rollouts step at ``opt_dt``; the returned trajectory is
    sampled at ``dt``. ``with_trajectory=False`` skips that sampling
    for callers that only need the bounce state.
    """
    if table is None:
        table = TableModel()
    identifiability = len(problem.post_obs) < 3
    if identifiability:
        warnings.warn(
            f"only {len(problem.post_obs)} post-bounce observations; "
            "spin is weakly constrained",
            IdentifiabilityWarning,
            stacklevel=2,
        )
    v0 = problem.init_v
    if v0 is None:
        v0 = _default_init_velocity(problem, table)
    w0 = problem.init_omega
    if w0 is None:
        w0 = np.zeros(3)
    starts = [
        (v0, w0),
        (v0 * np.array([1.0, -1.0, 1.0]), w0),
        (v0, np.array([30.0, 0.0, 0.0])),
        (v0, np.array([-30.0, 0.0, 0.0])),
    ]

    obs_px = _observed_pixels(problem)
    pre_times = [d.t for d in problem.pre_obs]
    post_times = [d.t for d in problem.post_obs]

    theta = history = None
    iterations = 0
    converged = False
    for sv, sw in starts:
        theta0 = np.concatenate([sv, sw])
        theta1, hist1, iters1, conv1 = _run_lm(
            problem, theta0, obs_px, pre_times, post_times, opt_dt, max_iters,
            _VELOCITY_ONLY,
        )
        iterations += iters1
        if not conv1:
            continue
        theta, hist2, iters2, converged = _run_lm(
            problem, theta1, obs_px, pre_times, post_times, opt_dt, max_iters,
            _ALL_STATE,
        )
        iterations += iters2
        history = hist1 + hist2[1:]  # stage 2 re-measures the same state first
        if converged:
            break
    if not converged:
        raise NoConvergence(
            f"no start converged within {max_iters} iterations per start"
        )

    v_minus, omega_minus = theta[:3], theta[3:]
    outcome = apply_bounce(v_minus, omega_minus, problem.params)
    rmse = math.sqrt(history[-1] / len(obs_px))
    trajectory = (
        _sample_trajectory(problem, v_minus, omega_minus, outcome, dt)
        if with_trajectory
        else []
    )
    second = find_plane_crossing(
        BallState(
            p=problem.anchor.X_bounce,
            v=outcome.v_plus,
            omega=outcome.omega_plus,
            t=problem.anchor.t_star,
        ),
        problem.params,
        surface_z=table.height,
    )
    second_ok = second is not None and table.contains_xy(
        second.p, margin=SUCCESS_BOUNCE_MARGIN
    )
    return ReconResult(
        v_minus=v_minus,
        omega_minus=omega_minus,
        v_plus=outcome.v_plus,
        omega_plus=outcome.omega_plus,
        trajectory=trajectory,
        reproj_rmse=rmse,
        converged=converged,
        iterations=iterations,
        cost_history=history,
        success=converged and rmse < SUCCESS_RMSE_PX and second_ok,
        identifiability_warning=identifiability,
    )


def _sample_trajectory(problem, v_minus, omega_minus, outcome, dt) -> list[BallState]:
    """States at dt spacing from the first to the last observation,
    anchored exactly at the bounce."""
    anchor = problem.anchor
    states: list[BallState] = []
    dur_back = anchor.t_star - problem.pre_obs[0].t if problem.pre_obs else 0.0
    dur_fwd = problem.post_obs[-1].t - anchor.t_star if problem.post_obs else 0.0
    if dur_back > 0:
        s0 = BallState(p=anchor.X_bounce, v=v_minus, omega=omega_minus, t=anchor.t_star)
        back = integrate_flight(s0, dt, dur_back, direction="backward", params=problem.params)
        states.extend(reversed(back))
    if dur_fwd > 0:
        s1 = BallState(
            p=anchor.X_bounce, v=outcome.v_plus, omega=outcome.omega_plus, t=anchor.t_star
        )
        fwd = integrate_flight(s1, dt, dur_fwd, direction="forward", params=problem.params)
        if states:
            states.pop()  # drop the pre-bounce copy of the anchor state
        states.extend(fwd)
    return states


@dataclass
class BounceReconstruction:
    """Per-bounce outcome within a rally; failures carry their error."""

    event: Event
    anchor: BounceAnchor | None
    problem: ReconProblem | None
    result: ReconResult | None
    error: Rally3DError | None


def reconstruct_rally(
    track: list[Detection],
    segments: list[Segment],
    events: list[Event],
    cam: CalibratedCamera,
    params: PhysParams | None = None,
    table: TableModel | None = None,
    with_trajectory: bool = True,
) -> list[BounceReconstruction]:
    """Reconstruct every table bounce of a segmented rally.

    Each bounce uses the detections of its two adjacent segments, which
    the segmentation already clips at the neighboring racket strikes. A
    failing bounce records its error and the rally continues; results
    come back in event-time order.
    """
    if params is None:
        params = PhysParams.table_tennis()
    if table is None:
        table = TableModel()
    out = []
    for ev in events:
        if ev.kind != TABLE_BOUNCE:
            continue
        anchor = problem = result = error = None
        try:
            anchor = bounce_anchor(cam, ev, table, params.r)
            left = segments[ev.left_segment]
            right = segments[ev.right_segment]
            pre = [d for d in track[left.start_idx : left.end_idx + 1] if d.t < ev.t_star]
            post = [d for d in track[right.start_idx : right.end_idx + 1] if d.t > ev.t_star]
            problem = ReconProblem(
                camera=cam, anchor=anchor, pre_obs=pre, post_obs=post, params=params
            )
            result = reconstruct(problem, table=table, with_trajectory=with_trajectory)
        except Rally3DError as exc:
            error = exc
        out.append(
            BounceReconstruction(
                event=ev, anchor=anchor, problem=problem, result=result, error=error
            )
        )
    out.sort(key=lambda b: b.event.t_star)
    return out
