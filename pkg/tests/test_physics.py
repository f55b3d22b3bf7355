"""Flight ODE and bounce model checks with hand-computed oracle values."""

import math

import numpy as np
import pytest

from rally3d.errors import BallMovingAway, PlaneCrossing
from rally3d.physics import (
    BallState,
    PhysParams,
    acceleration,
    apply_bounce,
    bounce_alpha,
    find_plane_crossing,
    flight_derivative,
    integrate_flight,
    tennis_coefficients,
)

TT = PhysParams.table_tennis()


class TestFlightDerivative:
    def test_free_fall(self):
        s = BallState(p=[0, 0, 1], v=[0, 0, 0], omega=[0, 0, 0])
        dp, dv = flight_derivative(s, TT)
        np.testing.assert_allclose(dp, [0, 0, 0])
        np.testing.assert_allclose(dv, [0, 0, -9.81])

    def test_pure_drag(self):
        # -k_D*|v|*v_x/m = -3.8e-4 * 10 * 10 / 2.7e-3 = -14.074074...
        s = BallState(p=[0, 0, 1], v=[10, 0, 0], omega=[0, 0, 0])
        _, dv = flight_derivative(s, TT)
        np.testing.assert_allclose(dv, [-0.038 / 2.7e-3, 0.0, -9.81], atol=1e-12)
        np.testing.assert_allclose(dv[0], -14.074074074074074, atol=1e-12)

    def test_magnus_perpendicular(self):
        # k_M*(omega x v)/m with omega=(0,0,100), v=(10,0,0):
        # omega x v = (0*0-100*0, 100*10-0*0, 0) = (0, 1000, 0)
        # 4.86e-6 * 1000 / 2.7e-3 = 1.8 m/s^2 along +y
        s = BallState(p=[0, 0, 1], v=[10, 0, 0], omega=[0, 0, 100])
        _, dv = flight_derivative(s, TT)
        np.testing.assert_allclose(dv[1], 1.8, atol=1e-12)
        # Magnus component is perpendicular to both v and omega
        magnus = dv - np.array([-14.074074074074074, 0, -9.81])
        assert abs(magnus @ s.v) < 1e-12
        assert abs(magnus @ s.omega) < 1e-12

    def test_batched_matches_single(self):
        rng = np.random.default_rng(2)
        v = rng.normal(scale=5, size=(40, 3))
        w = rng.normal(scale=40, size=(40, 3))
        batch = acceleration(v, w, TT)
        for i in range(40):
            np.testing.assert_allclose(batch[i], acceleration(v[i], w[i], TT), atol=1e-14)


class TestIntegrateFlight:
    def test_drag_free_ballistic_arc(self):
        params = PhysParams(k_D=0.0, k_M=0.0)
        s0 = BallState(p=[0, 0, 1], v=[1, 0, 0], omega=[0, 0, 0])
        states = integrate_flight(s0, dt=1 / 500, duration=0.2, params=params)
        expect = np.array([0.2, 0.0, 1.0 - 4.905 * 0.2**2])
        np.testing.assert_allclose(states[-1].p, expect, atol=1e-9)
        assert abs(states[-1].t - 0.2) < 1e-12

    def test_terminal_speed_from_vertical_drop(self):
        # drag balance m*g = k_D*v^2 -> v_t = sqrt(m*g/k_D) ~ 8.3488 m/s
        v_t = math.sqrt(TT.m * 9.81 / TT.k_D)
        s0 = BallState(p=[0, 0, 1000], v=[0, 0, 0], omega=[0, 0, 0])
        states = integrate_flight(s0, dt=1 / 500, duration=3.0, params=TT)
        speeds = [np.linalg.norm(s.v) for s in states]
        assert abs(speeds[-1] - v_t) / v_t < 0.01
        # approached monotonically from below
        assert all(b >= a - 1e-12 for a, b in zip(speeds, speeds[1:]))
        assert speeds[-1] < v_t

    def test_forward_backward_round_trip(self):
        s0 = BallState(p=[0.1, -1.0, 1.2], v=[1.5, 4.0, -2.0], omega=[30, 10, 5])
        fwd = integrate_flight(s0, dt=1 / 500, duration=0.3, params=TT)
        back = integrate_flight(fwd[-1], dt=1 / 500, duration=0.3,
                                direction="backward", params=TT)
        np.testing.assert_allclose(back[-1].p, s0.p, atol=1e-7)
        np.testing.assert_allclose(back[-1].v, s0.v, atol=1e-6)
        assert abs(back[-1].t - s0.t) < 1e-9

    def test_partial_final_step(self):
        s0 = BallState(p=[0, 0, 1], v=[0, 0, 0], omega=[0, 0, 0])
        states = integrate_flight(s0, dt=1 / 500, duration=0.2505, params=TT)
        assert abs(states[-1].t - 0.2505) < 1e-12

    def test_plane_crossing_detected(self):
        s0 = BallState(p=[0, 0, 1.0], v=[0.5, 1.0, 0.0], omega=[0, 0, 0])
        with pytest.raises(PlaneCrossing) as exc:
            integrate_flight(s0, dt=1 / 500, duration=1.0, params=TT, surface_z=0.76)
        assert 0.0 < exc.value.t_before < exc.value.t_after < 1.0

    def test_no_crossing_without_surface(self):
        s0 = BallState(p=[0, 0, 1.0], v=[0.5, 1.0, 0.0], omega=[0, 0, 0])
        states = integrate_flight(s0, dt=1 / 500, duration=1.0, params=TT)
        assert states[-1].p[2] < 0.76  # sailed through the table plane

    def test_spin_carried_unchanged(self):
        s0 = BallState(p=[0, 0, 1], v=[1, 1, 1], omega=[10, 20, 30])
        states = integrate_flight(s0, dt=1 / 500, duration=0.1, params=TT)
        np.testing.assert_allclose(states[-1].omega, [10, 20, 30])


class TestConvergenceOrder:
    def test_rk4_halving_improves_by_fourth_order(self):
        # 0.5 s topspin lob; reference at dt/16
        s0 = BallState(p=[0, -1.0, 1.0], v=[0.5, 6.0, 2.5], omega=[80, 0, 0])
        ref = integrate_flight(s0, dt=1 / 8000, duration=0.5, params=TT)[-1]
        e = []
        for dt in (1 / 500, 1 / 1000):
            end = integrate_flight(s0, dt=dt, duration=0.5, params=TT)[-1]
            e.append(np.linalg.norm(end.p - ref.p))
        assert e[0] / e[1] >= 15.0  # fourth-order: ratio ~16


class TestBounceAlpha:
    def test_hand_computed_value(self):
        # 0.3 * (1 + 0.85) * 3 / 1 = 1.665
        assert abs(bounce_alpha([1, 0, -3], [0, 0, 0], TT) - 1.665) < 1e-12

    def test_zero_slip_gives_sentinel(self):
        assert bounce_alpha([0, 0, -3], [0, 0, 0], TT) == math.inf

    def test_slip_from_spin_alone(self):
        # contact-point velocity = (v_x - r*w_y, v_y + r*w_x): spin w_y = v_x/r
        # cancels the x slip exactly
        assert bounce_alpha([1, 0, -3], [0, 50, 0], TT) == math.inf

    def test_doubling_slip_halves_alpha(self):
        a1 = bounce_alpha([1, 0, -3], [0, 0, 0], TT)
        a2 = bounce_alpha([2, 0, -3], [0, 0, 0], TT)
        assert abs(a1 / a2 - 2.0) < 1e-12

    def test_upward_motion_rejected(self):
        with pytest.raises(BallMovingAway):
            bounce_alpha([1, 0, 0.5], [0, 0, 0], TT)


class TestApplyBounce:
    def test_rolling_oracle(self):
        # alpha = 1.665 >= 0.4 -> rolling
        # v+ = (0.6*1, 0, 0.85*3) = (0.6, 0, 2.55)
        # w+_y = (0.6/0.02)*1 = 30
        out = apply_bounce([1, 0, -3], [0, 0, 0], TT)
        assert out.regime == "rolling"
        np.testing.assert_allclose(out.v_plus, [0.6, 0.0, 2.55], atol=1e-12)
        np.testing.assert_allclose(out.omega_plus, [0.0, 30.0, 0.0], atol=1e-12)

    def test_no_slip_construction_routes_to_rolling(self):
        out = apply_bounce([1, 0, -3], [0, 50, 0], TT)
        assert out.regime == "rolling"
        assert out.alpha == math.inf
        # v+_x = 0.6*1 + 0.4*0.02*50 = 1.0: rolling contact preserved
        np.testing.assert_allclose(out.v_plus, [1.0, 0.0, 2.55], atol=1e-12)
        np.testing.assert_allclose(out.omega_plus, [0.0, 50.0, 0.0], atol=1e-12)

    def test_sliding_oracle(self):
        # alpha = 0.3*1.85*1/10 = 0.0555 < 0.4 -> sliding
        # v+ = ((1-0.0555)*10, 0, 0.85) ; w+_y = 1.5*0.0555/0.02*10 = 41.625
        out = apply_bounce([10, 0, -1], [0, 0, 0], TT)
        assert out.regime == "sliding"
        assert abs(out.alpha - 0.0555) < 1e-12
        np.testing.assert_allclose(out.v_plus, [9.445, 0.0, 0.85], atol=1e-12)
        np.testing.assert_allclose(out.omega_plus, [0.0, 41.625, 0.0], atol=1e-10)

    def test_restitution_on_vertical_component(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            v = rng.uniform([-8, -8, -9], [8, 8, -0.5])
            w = rng.uniform(-120, 120, 3)
            out = apply_bounce(v, w, TT)
            np.testing.assert_allclose(out.v_plus[2], 0.85 * abs(v[2]), atol=1e-12)

    def test_regime_continuity_at_threshold(self):
        # at alpha exactly 0.4 the sliding matrices equal the rolling ones
        from rally3d.physics import _rolling_matrices, _sliding_matrices

        roll = _rolling_matrices(TT)
        slide = _sliding_matrices(0.4, TT)
        for Mr, Ms in zip(roll, slide):
            np.testing.assert_allclose(Mr, Ms, atol=1e-12)


class TestTennis:
    def test_drag_coefficient_at_reference_speed(self):
        c_d, c_m = tennis_coefficients([50, 0, 0], [0, 0, 0])
        assert c_d == 0.6204
        assert c_m == 0.0

    def test_magnus_coefficient(self):
        _, c_m = tennis_coefficients([50, 0, 0], [0, 0, 100])
        assert abs(c_m - 0.0468) < 1e-15

    def test_zero_spin_no_blowup(self):
        p = PhysParams.tennis_grass()
        acc = acceleration(np.array([30.0, 0, 0]), np.zeros(3), p)
        assert np.all(np.isfinite(acc))
        # pure drag + gravity: no lateral component
        assert acc[1] == 0.0

    def test_presets(self):
        grass = PhysParams.tennis_grass()
        clay = PhysParams.tennis_clay()
        assert grass.m == 5.7e-2 and grass.r == 0.033
        assert (grass.mu, grass.k_COR) == (0.55, 0.68)
        assert (clay.mu, clay.k_COR) == (0.9, 0.85)
        with pytest.raises(ValueError):
            PhysParams.preset("lawn-bowls")

    def test_tennis_drag_slows_ball(self):
        p = PhysParams.tennis_clay()
        s0 = BallState(p=[0, 0, 2], v=[30, 0, 0], omega=[0, 0, 0])
        states = integrate_flight(s0, dt=1 / 500, duration=0.5, params=p)
        assert np.linalg.norm(states[-1].v[:2]) < 30.0


class TestFindPlaneCrossing:
    def test_crossing_lands_on_offset_plane(self):
        s0 = BallState(p=[0, 0, 0.78], v=[1, 2, 2.5], omega=[0, 0, 0])
        hit = find_plane_crossing(s0, TT, surface_z=0.76)
        assert hit is not None
        assert abs(hit.p[2] - 0.78) < 1e-9  # center one radius above surface
        assert hit.v[2] < 0

    def test_no_crossing_returns_none(self):
        s0 = BallState(p=[0, 0, 5.0], v=[0, 0, 50.0], omega=[0, 0, 0])
        assert find_plane_crossing(s0, TT, surface_z=0.76, t_max=0.5) is None

    def test_crossing_time_matches_dragfree_closed_form(self):
        params = PhysParams(k_D=0.0, k_M=0.0)
        # z(t) = 0.78 + 2.5t - 4.905t^2 = 0.78 -> t = 2.5/4.905
        s0 = BallState(p=[0, 0, 0.78], v=[0, 0, 2.5], omega=[0, 0, 0])
        hit = find_plane_crossing(s0, params, surface_z=0.76)
        assert abs(hit.t - 2.5 / 4.905) < 1e-9
