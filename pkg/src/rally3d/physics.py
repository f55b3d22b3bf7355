"""Ball flight and bounce dynamics.

Flight: drag + Magnus + gravity ODE integrated with classical RK4,
forward or backward in time. Spin is constant while airborne.

Bounce: instantaneous Coulomb-friction contact at the moment the ball
center sits one radius above the table surface. The contact is either
rolling or sliding depending on the slip coefficient alpha; each regime
maps (v-, omega-) to (v+, omega+) through a fixed set of 3x3 matrices.

Note the drag term opposes the velocity: the acceleration is
``(-k_D |v| v + k_M omega x v) / m + g``. Coefficients are chosen so the
terminal speed of a vertically falling ball is sqrt(m g / k_D).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np
from scipy.optimize import brentq

from .errors import BallMovingAway, PlaneCrossing

GRAVITY = 9.81  # m/s^2
AIR_DENSITY = 1.204  # kg/m^3 at 20 C sea level

#: sanity bound for racket-sport ball speeds
MAX_BALL_SPEED = 60.0

Variant = Literal["tabletennis", "tennis-grass", "tennis-clay"]


@dataclass
class BallState:
    """Ball position (m), velocity (m/s), spin (rad/s) at time t (s)."""

    p: np.ndarray
    v: np.ndarray
    omega: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64).reshape(3)
        self.v = np.asarray(self.v, dtype=np.float64).reshape(3)
        self.omega = np.asarray(self.omega, dtype=np.float64).reshape(3)
        if not (
            np.all(np.isfinite(self.p))
            and np.all(np.isfinite(self.v))
            and np.all(np.isfinite(self.omega))
        ):
            raise ValueError("ball state must be finite")


@dataclass
class PhysParams:
    """Physical constants for one ball/surface combination."""

    m: float = 2.7e-3
    k_D: float = 3.8e-4
    k_M: float = 4.86e-6
    g: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -GRAVITY]))
    r: float = 0.02
    mu: float = 0.3
    k_COR: float = 0.85
    alpha_threshold: float = 0.4
    variant: Variant = "tabletennis"
    rho: float = AIR_DENSITY  # air density, used by the tennis aerodynamics

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=np.float64).reshape(3)
        if self.m <= 0 or self.r <= 0:
            raise ValueError("mass and radius must be positive")
        if not (0.0 < self.k_COR <= 1.0):
            raise ValueError("restitution must be in (0, 1]")
        if self.mu < 0:
            raise ValueError("friction must be non-negative")

    @classmethod
    def table_tennis(cls) -> "PhysParams":
        return cls()

    @classmethod
    def tennis_grass(cls) -> "PhysParams":
        return cls(
            m=5.7e-2, r=0.033, mu=0.55, k_COR=0.68, variant="tennis-grass"
        )

    @classmethod
    def tennis_clay(cls) -> "PhysParams":
        return cls(
            m=5.7e-2, r=0.033, mu=0.9, k_COR=0.85, variant="tennis-clay"
        )

    @classmethod
    def preset(cls, name: str) -> "PhysParams":
        presets = {
            "tabletennis": cls.table_tennis,
            "tennis-grass": cls.tennis_grass,
            "tennis-clay": cls.tennis_clay,
        }
        if name not in presets:
            raise ValueError(f"unknown physics preset {name!r}")
        return presets[name]()


@dataclass
class BounceOutcome:
    """Post-bounce velocity and spin plus the contact regime."""

    v_plus: np.ndarray
    omega_plus: np.ndarray
    regime: Literal["rolling", "sliding"]
    alpha: float


def tennis_coefficients(v: np.ndarray, omega: np.ndarray) -> tuple[float, float]:
    """Speed/spin dependent drag and Magnus coefficients for a tennis ball.

    Both formulas use the scalar magnitudes |v| and |omega|; C_M is zero
    for a spinless ball.
    """
    s = float(np.linalg.norm(v))
    w = float(np.linalg.norm(omega))
    c_d = 0.6204 - 9.76e-4 * (s - 50.0) + (1.027e-4 - 2.24e-6 * (s - 50.0)) * w
    c_m = w * (4.68e-4 - 2.10e-5 * (s - 50.0))
    return c_d, c_m


def _cross_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cross product of (B, 3) arrays.

    np.cross spends most of its time in axis bookkeeping, which
    dominates the integrator at these batch sizes.
    """
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[:, 0] = a[:, 1] * b[:, 2] - a[:, 2] * b[:, 1]
    out[:, 1] = a[:, 2] * b[:, 0] - a[:, 0] * b[:, 2]
    out[:, 2] = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    return out


def acceleration(v: np.ndarray, omega: np.ndarray, params: PhysParams) -> np.ndarray:
    """Airborne acceleration for one state (3,) or a batch (B, 3)."""
    v = np.asarray(v, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    squeeze = v.ndim == 1
    v = np.atleast_2d(v)
    omega = np.atleast_2d(omega)
    speed = np.sqrt(np.einsum("ij,ij->i", v, v))[:, None]

    if params.variant == "tabletennis":
        drag = -params.k_D * speed * v
        magnus = params.k_M * _cross_rows(omega, v)
        acc = (drag + magnus) / params.m + params.g
    else:
        spin = np.sqrt(np.einsum("ij,ij->i", omega, omega))[:, None]
        ds = speed - 50.0
        c_d = 0.6204 - 9.76e-4 * ds + (1.027e-4 - 2.24e-6 * ds) * spin
        c_m = spin * (4.68e-4 - 2.10e-5 * ds)
        area = 0.5 * params.rho * math.pi * params.r**2
        f_drag = -area * c_d * speed * v
        # Magnus direction (omega x v)/|omega|; zero force for |omega| ~ 0
        cross = _cross_rows(omega, v)
        safe_spin = np.where(spin < 1e-9, 1.0, spin)
        f_magnus = np.where(
            spin < 1e-9, 0.0, area * c_m * speed * cross / safe_spin
        )
        acc = (f_drag + f_magnus) / params.m + params.g

    return acc[0] if squeeze else acc


def flight_derivative(
    state: BallState, params: PhysParams
) -> tuple[np.ndarray, np.ndarray]:
    """Time derivatives (dp, dv) of the airborne ball; spin is constant."""
    return state.v.copy(), acceleration(state.v, state.omega, params)


def _rk4_step(
    p: np.ndarray, v: np.ndarray, omega: np.ndarray, h: float, params: PhysParams
) -> tuple[np.ndarray, np.ndarray]:
    """One classical RK4 step of length h (may be negative). Batched over rows."""
    a1 = acceleration(v, omega, params)
    k1p, k1v = v, a1
    a2 = acceleration(v + 0.5 * h * k1v, omega, params)
    k2p, k2v = v + 0.5 * h * k1v, a2
    a3 = acceleration(v + 0.5 * h * k2v, omega, params)
    k3p, k3v = v + 0.5 * h * k2v, a3
    a4 = acceleration(v + h * k3v, omega, params)
    k4p, k4v = v + h * k3v, a4
    p_new = p + (h / 6.0) * (k1p + 2.0 * k2p + 2.0 * k3p + k4p)
    v_new = v + (h / 6.0) * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
    return p_new, v_new


def integrate_flight(
    s0: BallState,
    dt: float,
    duration: float,
    direction: Literal["forward", "backward"] = "forward",
    params: PhysParams | None = None,
    surface_z: float | None = None,
) -> list[BallState]:
    """Integrate the flight ODE with fixed-step RK4.

    Returns states at every step including both endpoints; the final
    step is shortened so the last state lands exactly at ``duration``.
    With ``surface_z`` set, raises PlaneCrossing as soon as the ball
    center crosses the plane z = surface_z + r (the caller is expected
    to split trajectories at bounces).
    """
    if params is None:
        params = PhysParams.table_tennis()
    if dt <= 0 or duration <= 0:
        raise ValueError("dt and duration must be positive")
    if direction not in ("forward", "backward"):
        raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")
    sign = 1.0 if direction == "forward" else -1.0

    n_full = int(duration / dt + 1e-12)
    remainder = duration - n_full * dt
    steps = [dt] * n_full + ([remainder] if remainder > 1e-12 else [])

    states = [replace(s0, p=s0.p.copy(), v=s0.v.copy(), omega=s0.omega.copy())]
    p, v, t = s0.p.copy(), s0.v.copy(), s0.t
    h_prev = None
    if surface_z is not None:
        h_prev = p[2] - params.r - surface_z
    for h in steps:
        p, v = _rk4_step(p, v, s0.omega, sign * h, params)
        t = t + sign * h
        if surface_z is not None:
            h_new = p[2] - params.r - surface_z
            if (h_prev > 1e-9 and h_new < -1e-9) or (
                h_prev < -1e-9 and h_new > 1e-9
            ):
                raise PlaneCrossing(states[-1].t, t)
            h_prev = h_new
        states.append(BallState(p=p.copy(), v=v.copy(), omega=s0.omega.copy(), t=t))
    return states


def find_plane_crossing(
    s0: BallState,
    params: PhysParams,
    surface_z: float,
    dt: float = 1.0 / 500.0,
    t_max: float = 5.0,
) -> BallState | None:
    """March forward until the ball center crosses z = surface_z + r.

    Returns the state at the crossing instant (refined to ~1e-12 s by
    root-finding inside the bracketing step) or None if no crossing
    happens within ``t_max`` seconds.
    """
    p, v, t = s0.p.copy(), s0.v.copy(), s0.t
    h_prev = p[2] - params.r - surface_z
    elapsed = 0.0
    while elapsed < t_max:
        h_step = min(dt, t_max - elapsed)
        p_new, v_new = _rk4_step(p, v, s0.omega, h_step, params)
        h_new = p_new[2] - params.r - surface_z

        if h_prev > 1e-9 and h_new < 0.0:
            p_base, v_base = p, v

            def height_after(lam: float) -> float:
                if lam == 0.0:
                    return h_prev
                pl, _ = _rk4_step(p_base, v_base, s0.omega, lam, params)
                return pl[2] - params.r - surface_z

            lam_star = brentq(height_after, 0.0, h_step, xtol=1e-13)
            p_c, v_c = _rk4_step(p_base, v_base, s0.omega, lam_star, params)
            return BallState(p=p_c, v=v_c, omega=s0.omega.copy(), t=t + lam_star)

        p, v, t = p_new, v_new, t + h_step
        h_prev = h_new
        elapsed += h_step
    return None


def bounce_alpha(
    v_minus: np.ndarray, omega_minus: np.ndarray, params: PhysParams
) -> float:
    """Slip coefficient distinguishing rolling from sliding contact.

    Returns +inf when the tangential contact-point slip is (numerically)
    zero, which routes the bounce into the rolling regime.
    """
    v = np.asarray(v_minus, dtype=np.float64).reshape(3)
    w = np.asarray(omega_minus, dtype=np.float64).reshape(3)
    if v[2] >= 0:
        raise BallMovingAway(f"v_z = {v[2]:.4f} must be negative at impact")
    slip = math.hypot(v[0] - w[1] * params.r, v[1] + w[0] * params.r)
    if slip < 1e-12:
        return math.inf
    return params.mu * (1.0 + params.k_COR) * abs(v[2]) / slip


def _rolling_matrices(params: PhysParams):
    r, cor = params.r, params.k_COR
    A = np.array([[0.6, 0.0, 0.0], [0.0, 0.6, 0.0], [0.0, 0.0, -cor]])
    B = np.array([[0.0, 0.4 * r, 0.0], [-0.4 * r, 0.0, 0.0], [0.0, 0.0, 0.0]])
    C = np.array([[0.0, -0.6 / r, 0.0], [0.6 / r, 0.0, 0.0], [0.0, 0.0, 0.0]])
    D = np.array([[0.4, 0.0, 0.0], [0.0, 0.4, 0.0], [0.0, 0.0, 1.0]])
    return A, B, C, D


def _sliding_matrices(alpha: float, params: PhysParams):
    r, cor = params.r, params.k_COR
    A = np.array(
        [[1.0 - alpha, 0.0, 0.0], [0.0, 1.0 - alpha, 0.0], [0.0, 0.0, -cor]]
    )
    B = np.array(
        [[0.0, alpha * r, 0.0], [-alpha * r, 0.0, 0.0], [0.0, 0.0, 0.0]]
    )
    C = np.array(
        [
            [0.0, -1.5 * alpha / r, 0.0],
            [1.5 * alpha / r, 0.0, 0.0],
            [0.0, 0.0, 0.0],
        ]
    )
    D = np.array(
        [
            [1.0 - 1.5 * alpha, 0.0, 0.0],
            [0.0, 1.0 - 1.5 * alpha, 0.0],
            [0.0, 0.0, 1.0],
        ]
    )
    return A, B, C, D


def apply_bounce(
    v_minus: np.ndarray, omega_minus: np.ndarray, params: PhysParams
) -> BounceOutcome:
    """Map the pre-bounce state through the Coulomb contact model."""
    v = np.asarray(v_minus, dtype=np.float64).reshape(3)
    w = np.asarray(omega_minus, dtype=np.float64).reshape(3)
    alpha = bounce_alpha(v, w, params)
    if alpha >= params.alpha_threshold:
        regime = "rolling"
        A, B, C, D = _rolling_matrices(params)
    else:
        regime = "sliding"
        A, B, C, D = _sliding_matrices(alpha, params)
    return BounceOutcome(
        v_plus=A @ v + B @ w,
        omega_plus=C @ v + D @ w,
        regime=regime,
        alpha=alpha,
    )
