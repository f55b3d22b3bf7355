"""Rally segmentation: split a 2D ball track into parabolic arcs.

Each arc between ball contacts is nearly a parabola in image space, so
the track is partitioned by exact dynamic programming over breakpoints
minimizing

    J = sum_t (|u_t - P_u(t)| + |v_t - P_v(t)|)
        + blur_weight * sum_t B_t + lambda * K

where P_u, P_v are per-segment degree-2 polynomials (least absolute
deviations via IRLS), B_t the angular mismatch between the observed
motion-blur direction and the fitted velocity direction, and K the
number of segments. Contact events are then localized to sub-frame
precision at the intersection of adjacent fitted curves.

Blur streaks have no head or tail: angles are treated as axial
quantities (defined mod pi) throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .camgeom import CalibratedCamera, TableModel, intersect_ray_plane, pixel_ray, project
from .physics import PhysParams
from .errors import (
    DegenerateConfiguration,
    NoBlurData,
    NoIntersectionInWindow,
    RayParallelToPlane,
    TooFewPoints,
    TrackTooShort,
)

TABLE_BOUNCE = "table_bounce"
RACKET_STRIKE = "racket_strike"


@dataclass
class Detection:
    """One ball detection: pixel position at a timestamp, optional blur."""

    frame: int
    t: float
    u: float
    v: float
    blur_angle: float | None = None  # radians, axial (mod pi)
    blur_length: float | None = None  # px


@dataclass
class Segment:
    """Detections [start_idx, end_idx] fitted by u(t), v(t) parabolas.

    Coefficients are in the raw time basis: u(t) = c0 + c1*t + c2*t^2.
    fit_cost is the summed L1 position residual in px.
    """

    start_idx: int
    end_idx: int
    coeff_u: np.ndarray
    coeff_v: np.ndarray
    fit_cost: float

    def __post_init__(self):
        self.coeff_u = np.asarray(self.coeff_u, dtype=np.float64).reshape(3)
        self.coeff_v = np.asarray(self.coeff_v, dtype=np.float64).reshape(3)

    def eval(self, t):
        t = np.asarray(t, dtype=np.float64)
        u = self.coeff_u[0] + self.coeff_u[1] * t + self.coeff_u[2] * t**2
        v = self.coeff_v[0] + self.coeff_v[1] * t + self.coeff_v[2] * t**2
        return np.stack([u, v], axis=-1)

    def velocity(self, t):
        t = np.asarray(t, dtype=np.float64)
        du = self.coeff_u[1] + 2.0 * self.coeff_u[2] * t
        dv = self.coeff_v[1] + 2.0 * self.coeff_v[2] * t
        return np.stack([du, dv], axis=-1)


@dataclass
class SegConfig:
    lam: float = 30.0  # px, cost of opening a new segment
    blur_weight: float = 5.0  # px per radian of blur mismatch
    min_segment_len: int = 3
    max_gap_frames: int = 6  # a segment may not bridge a longer dropout
    event_window_frames: float = 2.0
    event_gate_px: float = 20.0

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lam must be positive")
        if self.blur_weight < 0:
            raise ValueError("blur_weight must be non-negative")
        if self.min_segment_len < 3:
            raise ValueError("min_segment_len must be at least 3")


@dataclass
class Event:
    """Ball-contact event between two adjacent segments."""

    kind: str | None
    t_star: float
    image_point: np.ndarray
    left_segment: int
    right_segment: int
    low_confidence: bool = False

    def __post_init__(self):
        self.image_point = np.asarray(self.image_point, dtype=np.float64).reshape(2)


def _lad_polyfit(t: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, float]:
    """Degree-2 least-absolute-deviation fit via IRLS (3 reweight rounds).

    Works in a time basis centered on the segment for conditioning;
    returned coefficients are re-expanded to the raw basis.
    """
    tc = t.mean()
    tau = t - tc
    A = np.column_stack([np.ones_like(tau), tau, tau**2])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    for _ in range(3):
        r = A @ coef - y
        w = 1.0 / np.maximum(np.abs(r), 1e-6)
        Aw = A * np.sqrt(w)[:, None]
        coef, *_ = np.linalg.lstsq(Aw, y * np.sqrt(w), rcond=None)
    cost = float(np.sum(np.abs(A @ coef - y)))
    a0, a1, a2 = coef
    raw = np.array([a0 - a1 * tc + a2 * tc**2, a1 - 2.0 * a2 * tc, a2])
    return raw, cost


def fit_segment(track, i: int, j: int) -> Segment:
    """LAD parabola fit of detections i..j (inclusive)."""
    if j - i < 2:
        raise TooFewPoints(f"parabola needs >= 3 points, got {j - i + 1}")
    t = np.array([d.t for d in track[i : j + 1]])
    u = np.array([d.u for d in track[i : j + 1]])
    v = np.array([d.v for d in track[i : j + 1]])
    coeff_u, cost_u = _lad_polyfit(t, u)
    coeff_v, cost_v = _lad_polyfit(t, v)
    return Segment(
        start_idx=i, end_idx=j, coeff_u=coeff_u, coeff_v=coeff_v,
        fit_cost=cost_u + cost_v,
    )


def axial_difference(a: float, b: float) -> float:
    """Angular distance between two orientations defined mod pi."""
    d = abs(a - b) % math.pi
    return min(d, math.pi - d)


def blur_residual(seg: Segment, det: Detection) -> float:
    """Mismatch (radians) between blur streak and fitted velocity direction."""
    if det.blur_angle is None:
        raise NoBlurData(f"detection at frame {det.frame} has no blur angle")
    du, dv = seg.velocity(det.t)
    return axial_difference(det.blur_angle, math.atan2(dv, du))


def _segment_blur_cost(seg: Segment, track, i: int, j: int) -> float:
    total = 0.0
    for d in track[i : j + 1]:
        if d.blur_angle is not None:
            total += blur_residual(seg, d)
    return total


def segment_cost(track, i: int, j: int, cfg: SegConfig) -> tuple[float, Segment]:
    """Full DP cost of making i..j one segment (excluding lambda)."""
    seg = fit_segment(track, i, j)
    return seg.fit_cost + cfg.blur_weight * _segment_blur_cost(seg, track, i, j), seg


def _validate_track(track):
    for a, b in zip(track, track[1:]):
        if b.t <= a.t:
            raise ValueError("detection timestamps must be strictly increasing")


def segment_rally(track, cfg: SegConfig | None = None) -> list[Segment]:
    """Optimal piecewise-parabolic partition of the track.

    Exact DP over breakpoints: cost[j] = min_i cost[i] + C(i+1, j) + lam,
    where C includes the L1 fit and blur terms. Segments shorter than
    min_segment_len or bridging a frame gap over max_gap_frames are
    disallowed.
    """
    if cfg is None:
        cfg = SegConfig()
    track = list(track)
    n = len(track)
    if n < cfg.min_segment_len:
        raise TrackTooShort(f"{n} detections < min segment length {cfg.min_segment_len}")
    _validate_track(track)

    # longest admissible segment start for each end (gap constraint)
    frames = np.array([d.frame for d in track])
    earliest = np.zeros(n, dtype=int)
    for j in range(1, n):
        earliest[j] = earliest[j - 1]
        if frames[j] - frames[j - 1] > cfg.max_gap_frames:
            earliest[j] = j

    segs = {}
    INF = math.inf
    best = [INF] * (n + 1)  # best[k]: optimal cost of first k detections
    back = [-1] * (n + 1)
    best[0] = 0.0
    for k in range(1, n + 1):
        j = k - 1
        i_min = earliest[j]
        for i in range(j - cfg.min_segment_len + 1, i_min - 1, -1):
            if i < 0 or best[i] == INF:
                continue
            c, seg = segment_cost(track, i, j, cfg)
            segs[(i, j)] = seg
            total = best[i] + c + cfg.lam
            if total < best[k]:
                best[k] = total
                back[k] = i
    if best[n] == INF:
        raise DegenerateConfiguration(
            "track cannot be partitioned under the gap/length constraints"
        )

    bounds = []
    k = n
    while k > 0:
        i = back[k]
        bounds.append((i, k - 1))
        k = i
    return [segs[b] for b in reversed(bounds)]


def segmentation_objective(track, segments, cfg: SegConfig) -> float:
    """J of a given segmentation (for oracle comparisons)."""
    total = 0.0
    for seg in segments:
        c, _ = segment_cost(track, seg.start_idx, seg.end_idx, cfg)
        total += c + cfg.lam
    return total


def locate_event(
    track, left: Segment, right: Segment, cfg: SegConfig | None = None
) -> tuple[float, np.ndarray]:
    """Sub-frame contact time/pixel at the crossing of two fitted arcs.

    Minimizes the squared curve-to-curve distance (a quartic in t) over
    the gap window extended by event_window_frames frame intervals on
    each side; the event pixel is the midpoint of the two curves there.
    """
    if cfg is None:
        cfg = SegConfig()
    t_left = track[left.end_idx].t
    t_right = track[right.start_idx].t
    dts = np.diff([d.t for d in track])
    frame_dt = float(np.median(dts))
    lo = t_left - cfg.event_window_frames * frame_dt
    hi = t_right + cfg.event_window_frames * frame_dt

    # distance^2 is a quartic: stationary points from its cubic derivative
    du = np.polysub(left.coeff_u[::-1], right.coeff_u[::-1])
    dv = np.polysub(left.coeff_v[::-1], right.coeff_v[::-1])
    dist2 = np.polyadd(np.polymul(du, du), np.polymul(dv, dv))
    deriv = np.polyder(dist2)
    roots = np.roots(deriv) if np.any(deriv != 0.0) else np.array([])
    cands = [lo, hi]
    for r in roots:
        if abs(r.imag) < 1e-9 and lo <= r.real <= hi:
            cands.append(float(r.real))
    cands = np.array(cands)
    d2 = np.polyval(dist2, cands)
    k = int(np.argmin(d2))
    t_star = float(cands[k])
    gap = math.sqrt(max(d2[k], 0.0))
    if gap > cfg.event_gate_px:
        raise NoIntersectionInWindow(
            f"arcs stay {gap:.1f} px apart in the event window "
            f"(gate {cfg.event_gate_px:.0f} px)"
        )
    point = 0.5 * (left.eval(t_star) + right.eval(t_star))
    return t_star, point


def detect_events(track, segments, cfg: SegConfig | None = None) -> list[Event]:
    """Locate the contact event between each adjacent segment pair.

    Pairs whose arcs never come within the gate (e.g. long occlusions)
    yield no event.
    """
    if cfg is None:
        cfg = SegConfig()
    events = []
    for k in range(len(segments) - 1):
        try:
            t_star, point = locate_event(track, segments[k], segments[k + 1], cfg)
        except NoIntersectionInWindow:
            continue
        events.append(
            Event(
                kind=None, t_star=t_star, image_point=point,
                left_segment=k, right_segment=k + 1,
            )
        )
    return events


# the longitudinal direction is usable only when stepping along world Y
# moves the image at least this fraction as fast as stepping along world
# X does; below it the signal mostly measures sideways motion, which a
# bounce legitimately changes through friction and spin
LONGITUDINAL_GAIN_RATIO = 0.5
_AXIS_STEP = 0.05  # m


def _longitudinal_axis(
    cam: CalibratedCamera, table: TableModel, pixel: np.ndarray
) -> np.ndarray | None:
    """Image direction of the table's length axis at the given pixel.

    Comes from dropping the pixel onto the table plane, stepping along
    world Y, and re-projecting. The raw +Y direction turns nearly
    vertical for end-on views, where the ball's fall/rise would alias
    into it and flip the longitudinal sign at every bounce, so the
    vertical image direction is projected out of it; the remainder is
    returned only where world-Y motion actually dominates it (see
    LONGITUDINAL_GAIN_RATIO). None means the view is end-on and the
    caller must classify by other means.
    """
    try:
        W = intersect_ray_plane(
            pixel_ray(cam, float(pixel[0]), float(pixel[1])),
            table.plane_normal, table.plane_point,
        )
        p0 = project(cam, W)
        py = project(cam, W + np.array([0.0, _AXIS_STEP, 0.0]))
        pz = project(cam, W + np.array([0.0, 0.0, _AXIS_STEP]))
        px = project(cam, W + np.array([_AXIS_STEP, 0.0, 0.0]))
    except Exception:
        return None
    d = py - p0
    dz = pz - p0
    nz = np.linalg.norm(dz)
    if nz > 1e-9:
        z_dir = dz / nz
        d = d - (d @ z_dir) * z_dir
    n = np.linalg.norm(d)
    if n < 1e-9:
        return None
    y_dir = d / n
    gain_y = n / _AXIS_STEP
    gain_x = abs(float((px - p0) @ y_dir)) / _AXIS_STEP
    if gain_y < LONGITUDINAL_GAIN_RATIO * gain_x:
        return None
    return y_dir


# an end-on contact is accepted as a bounce when one pre-contact world
# velocity, with its vertical component flipped by the restitution
# factor, explains both fitted image velocities to within this relative
# residual; a struck return reverses the depth rate, which is faint in
# the image but far too large for any such velocity to absorb. Bounces
# with heavy friction/spin slip reach ~0.25, most strikes either force
# the fit's v_z upward or sit far above
END_ON_FIT_REL = 0.30
_JAC_STEP = 1e-4  # m


def _restitution_fit(
    cam: CalibratedCamera,
    table: TableModel,
    pixel: np.ndarray,
    v_in: np.ndarray,
    v_out: np.ndarray,
    k_cor: float,
) -> tuple[float, np.ndarray] | None:
    """Best single-velocity restitution explanation of an event.

    Solves for the world velocity v minimizing
    ``|J v - v_in|^2 + |J R v - v_out|^2`` where J is the projection
    Jacobian at the table point under the pixel and R flips v_z by
    -k_cor. Returns (relative residual, v), or None when the pixel has
    no table point. Horizontal spin/friction changes at a real bounce
    are unmodeled and land in the residual, so the acceptance threshold
    must sit well above their share.
    """
    try:
        W = intersect_ray_plane(
            pixel_ray(cam, float(pixel[0]), float(pixel[1])),
            table.plane_normal, table.plane_point,
        )
    except Exception:
        return None
    J = np.empty((2, 3))
    for k in range(3):
        e = np.zeros(3)
        e[k] = _JAC_STEP
        J[:, k] = (project(cam, W + e) - project(cam, W - e)) / (2.0 * _JAC_STEP)
    A = np.vstack([J, J @ np.diag([1.0, 1.0, -k_cor])])
    m = np.concatenate([v_in, v_out])
    v_hat, *_ = np.linalg.lstsq(A, m, rcond=None)
    rel = float(np.linalg.norm(A @ v_hat - m) / max(np.linalg.norm(m), 1e-9))
    return rel, v_hat


# below this image-velocity mismatch the two arcs are one continued
# flight that the fitter split, not a contact
CONTINUATION_FLOOR = 60.0  # px/s
CONTINUATION_REL = 0.10


def classify_events(
    segments, events, cam: CalibratedCamera, table: TableModel | None = None,
    params: PhysParams | None = None,
) -> list[Event]:
    """Label events by the longitudinal direction change.

    The fitted image velocities just before/after the event are resolved
    along the image direction of the table's length axis (world Y); a
    sign flip means the ball was struck back, otherwise it bounced.
    Vertical image motion is projected out of that axis so steep drops
    do not masquerade as strikes. End-on views carry no usable
    longitudinal direction (apparent rise and fall there mix the true
    vertical rate with perspective pull toward the vanishing point, and
    the pull wins for fast flat drives), so they are tested against the
    restitution model instead: a bounce admits a single world velocity
    explaining both arcs once its vertical component is flipped, a
    struck return does not. End-on labels always carry low confidence;
    a soft return reversing only a small depth rate can still pass the
    fit. Other degenerate cases (no axis direction, negligible
    longitudinal motion) default to low-confidence bounces.

    A long smooth flight exceeds what one quadratic can track, so the
    fitter splits it; the join has no velocity discontinuity and is
    dropped here rather than labeled.
    """
    if table is None:
        table = TableModel()
    if params is None:
        params = PhysParams()
    out = []
    for ev in events:
        left = segments[ev.left_segment]
        right = segments[ev.right_segment]
        v_in = left.velocity(ev.t_star)
        v_out = right.velocity(ev.t_star)
        dv = float(np.linalg.norm(v_out - v_in))
        mag = max(float(np.linalg.norm(v_in)), float(np.linalg.norm(v_out)))
        if dv < max(CONTINUATION_FLOOR, CONTINUATION_REL * mag):
            continue
        y_dir = _longitudinal_axis(cam, table, ev.image_point)
        if y_dir is not None:
            s_in = float(v_in @ y_dir)
            s_out = float(v_out @ y_dir)
            floor_in = max(2.0, 0.02 * np.linalg.norm(v_in))
            floor_out = max(2.0, 0.02 * np.linalg.norm(v_out))
            if abs(s_in) < floor_in or abs(s_out) < floor_out:
                kind, low = TABLE_BOUNCE, True
            elif s_in * s_out < 0:
                kind, low = RACKET_STRIKE, False
            else:
                kind, low = TABLE_BOUNCE, False
        else:
            fit = _restitution_fit(
                cam, table, ev.image_point, v_in, v_out, params.k_COR
            )
            if fit is None:
                kind = TABLE_BOUNCE
            else:
                rel, v_hat = fit
                bounce = rel < END_ON_FIT_REL and v_hat[2] < 0
                kind = TABLE_BOUNCE if bounce else RACKET_STRIKE
            low = True
        out.append(
            Event(
                kind=kind, t_star=ev.t_star, image_point=ev.image_point.copy(),
                left_segment=ev.left_segment, right_segment=ev.right_segment,
                low_confidence=low,
            )
        )
    return out
