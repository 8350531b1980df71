import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ttagent import _kernels as K
from ttagent.ballistics import (
    BACKHAND,
    CENTER,
    FOREHAND,
    TOPSPIN,
    UNDERSPIN,
    BallCategory,
    BallState,
    ContactParams,
    FlightParams,
    PaddleState,
    annotate_style_side,
    aero_forces,
    bounce_table,
    classify_category,
    contact_paddle,
    mirror_state,
    simulate_trajectory,
    step_flight,
)
from ttagent.errors import InvalidStateError, NotClassifiableError, PreconditionError

NO_AERO = FlightParams(blunt_drag=0.0, magnus_lift=0.0)
ELASTIC = ContactParams(table_restitution_normal=1.0, table_friction=0.0, paddle_restitution_topspin=1.0,
                        paddle_restitution_underspin=1.0, paddle_friction=0.0)

finite = st.floats(-30, 30, allow_nan=False)
spins = st.floats(-300, 300, allow_nan=False)


def ball(p=(0, 0, 0.5), v=(0, 0, 0), w=(0, 0, 0)):
    return BallState(p, v, w)


def test_rest_ball_only_gravity():
    s = step_flight(ball(w=(0, 0, 0)))
    assert s.velocity[2] == pytest.approx(-9.81 * 0.001, abs=1e-15)
    assert np.array_equal(s.spin, np.zeros(3))


def test_parabola_in_ballistic_limit():
    s = ball((0.1, -1.0, 0.3), (0.5, 4.0, 2.0))
    s0 = s
    for i in range(1, 301):
        s = step_flight(s, NO_AERO)
        t = i * NO_AERO.dt
        ref = s0.position + s0.velocity * t + 0.5 * np.array([0, 0, -9.81]) * t * t
        assert np.max(np.abs(s.position - ref)) <= 1e-9


def test_topspin_curves_down_and_matches_cross_product():
    # incoming balls travel -y, where +wx is topspin
    s = ball(v=(0, -5, 0), w=(100, 0, 0))
    drag, magnus = aero_forces(s)
    p = FlightParams()
    brute = p.magnus_lift * p.air_density * (4 / 3) * math.pi * p.ball_radius**3 * np.array(
        [s.spin[1] * s.velocity[2] - s.spin[2] * s.velocity[1],
         s.spin[2] * s.velocity[0] - s.spin[0] * s.velocity[2],
         s.spin[0] * s.velocity[1] - s.spin[1] * s.velocity[0]])
    assert magnus[2] < 0
    np.testing.assert_allclose(magnus, brute, rtol=1e-12)


def test_kernel_acceleration_matches_force_law():
    s = ball(v=(1.0, -6.0, 1.5), w=(80, -20, 30))
    p = FlightParams()
    drag, magnus = aero_forces(s, p)
    a = np.array(K.accel(*s.velocity, *s.spin, p.packed))
    expected = (drag + magnus) / p.ball_mass + np.array([0, 0, -p.gravity])
    np.testing.assert_allclose(a, expected, rtol=1e-12)


@given(st.tuples(finite, finite, finite), st.tuples(spins, spins, spins))
@settings(max_examples=200)
def test_drag_dissipative_and_magnus_perpendicular(v, w):
    s = ball(v=v, w=w)
    drag, magnus = aero_forces(s)
    vv = np.asarray(v)
    assert drag @ vv <= 0
    scale = np.linalg.norm(magnus) * np.linalg.norm(vv)
    if scale > 0:
        assert abs(magnus @ vv) <= 1e-9 * scale


def test_non_finite_state_rejected():
    with pytest.raises(InvalidStateError):
        step_flight(ball(v=(np.nan, 0, 0)))


def test_step_is_deterministic():
    s = ball(v=(1, -5, 1), w=(50, 3, -2))
    assert step_flight(s) == step_flight(s)


def test_decoupled_bounce():
    out = bounce_table(ball((0, 0.5, 0.02), (0, 4, -3)), ContactParams(table_friction=0.0))
    np.testing.assert_allclose(out.velocity, [0, 4, 2.7], atol=1e-12)
    np.testing.assert_allclose(out.spin, 0.0, atol=1e-12)


def test_spin_changes_forward_speed_on_bounce():
    # slow enough that the rim speed reverses the contact slip for topspin
    top = bounce_table(ball((0, -0.5, 0.02), (0, -1, -3), (100, 0, 0)))
    under = bounce_table(ball((0, -0.5, 0.02), (0, -1, -3), (-100, 0, 0)))
    assert -top.velocity[1] > 1 > -under.velocity[1]


def test_sliding_bounce_is_spin_independent():
    a = bounce_table(ball((0, -0.5, 0.02), (0, -4, -3), (100, 0, 0)))
    b = bounce_table(ball((0, -0.5, 0.02), (0, -4, -3), (-100, 0, 0)))
    np.testing.assert_allclose(a.velocity, b.velocity, atol=1e-12)


def test_elastic_bounce_conserves_energy():
    s = ball((0.1, 0.5, 0.02), (1, 4, -3), (0, 0, 0))
    out = bounce_table(s, ContactParams(table_restitution_normal=1.0, table_friction=0.0))
    assert out.velocity @ out.velocity == pytest.approx(s.velocity @ s.velocity, rel=1e-9)


def test_bounce_requires_downward_ball():
    with pytest.raises(PreconditionError):
        bounce_table(ball((0, 0.5, 0.02), (0, 4, 3)))


def test_paddle_mirror_reflection():
    e = ContactParams().paddle_restitution_topspin
    pad = PaddleState((0, 0, 0.3), (0, -1, 0))
    out = contact_paddle(ball((0, 0.02, 0.3), (0, -5, 0)), pad, ContactParams(paddle_friction=0.0))
    np.testing.assert_allclose(out.velocity, [0, 5 * e, 0], atol=1e-12)


def test_paddle_contact_is_bimodal():
    pad = PaddleState((0, 0, 0.3), (0, -1, 0))
    b = ball((0, 0.02, 0.3), (0, -5, 0))
    top = contact_paddle(b, pad, incoming_spin_class=TOPSPIN)
    under = contact_paddle(b, pad, incoming_spin_class=UNDERSPIN)
    assert np.linalg.norm(top.velocity) != np.linalg.norm(under.velocity)


def test_moving_paddle_into_resting_ball():
    c = ContactParams(paddle_friction=0.0)
    e = c.paddle_restitution_topspin
    pad = PaddleState((0, -0.02, 0.3), (0, 1, 0), velocity=(0, 3, 0))
    out = contact_paddle(ball((0, 0.0, 0.3)), pad, c)
    np.testing.assert_allclose(out.velocity, [0, (1 + e) * 3, 0], atol=1e-12)
    # momentum bookkeeping in the paddle frame: relative normal speed reverses scaled by e
    rel_in = 0.0 - 3.0
    rel_out = out.velocity[1] - 3.0
    assert rel_out == pytest.approx(-e * rel_in, abs=1e-12)


def test_paddle_separating_ball_rejected():
    pad = PaddleState((0, 0, 0.3), (0, -1, 0))
    with pytest.raises(PreconditionError):
        contact_paddle(ball((0, 0.02, 0.3), (0, 5, 0)), pad)


def test_drop_bounces_at_drop_point():
    tr = simulate_trajectory(ball((0.1, 0.4, 0.5)), horizon=1.0)
    first = tr.events[0]
    assert first.kind == "bounce"
    np.testing.assert_allclose(first.position[:2], [0.1, 0.4], atol=1e-9)


def test_low_ball_into_net():
    tr = simulate_trajectory(ball((0, 1.0, 0.08), (0, -6, 0)), horizon=1.0)
    assert tr.net_fault
    assert not any(e.kind == "bounce" and e.position[1] < 0 for e in tr.events)


def test_landing_matches_fine_step_reference():
    s = ball((0.2, 1.5, 0.3), (-0.5, -5.5, 1.0), (60, 5, 10))
    coarse = simulate_trajectory(s, horizon=1.5).landing_point
    fine = simulate_trajectory(s, FlightParams(dt=1e-4), horizon=1.5).landing_point
    assert np.linalg.norm(coarse - fine) <= 5e-3


def test_energy_conserved_without_drag_and_with_elastic_contacts():
    s = ball((0.1, -0.3, 0.3), (0.1, -0.2, 0.0))
    tr = simulate_trajectory(s, NO_AERO, ELASTIC, horizon=2.0, stop_bounces=100)
    st_ = tr.states
    e = 0.5 * np.sum(st_[:, 3:6] ** 2, axis=1) + 9.81 * st_[:, 2]
    assert len(tr.bounces) >= 2
    assert np.max(np.abs(e - e[0])) / abs(e[0]) <= 1e-6


def test_first_order_convergence():
    s = ball((0.0, 1.2, 0.4), (0.4, -4.0, 1.5), (80, 10, -20))
    horizon = 0.6

    def endpoint(dt):
        tr = simulate_trajectory(s, FlightParams(dt=dt), ContactParams(), horizon=horizon)
        n = int(round(horizon / dt)) - 1
        return tr.states[min(n, len(tr.states) - 1), 0:3], tr.times[min(n, len(tr.times) - 1)]

    ref, _ = endpoint(1.25e-5)
    e1 = np.linalg.norm(endpoint(0.001)[0] - ref)
    e2 = np.linalg.norm(endpoint(0.0005)[0] - ref)
    assert 1.5 <= e1 / e2 <= 2.5


@pytest.mark.parametrize(
    "v,w,expected",
    [
        ((0, 8, 0), (60, 0, 0), BallCategory.FAST | BallCategory.TOPSPIN),
        ((0, 4, 0), (0, 0, 0), BallCategory.NORMAL | BallCategory.NOSPIN),
        ((0, 3, 3), (-30, 0, 0), BallCategory.SLOW | BallCategory.UNDERSPIN | BallCategory.LOB),
    ],
)
def test_category_examples(v, w, expected):
    assert classify_category(ball(v=v, w=w)) == expected


@given(st.tuples(finite, finite, finite), st.tuples(spins, spins, spins))
@settings(max_examples=500)
def test_categories_partition(v, w):
    c = classify_category(ball(v=v, w=w))
    speed = [x for x in (BallCategory.FAST, BallCategory.NORMAL, BallCategory.SLOW) if x in c]
    spin = [x for x in (BallCategory.TOPSPIN, BallCategory.NOSPIN, BallCategory.UNDERSPIN) if x in c]
    assert len(speed) == 1 and len(spin) == 1


def _ball_crossing_at(x):
    # straight-ish ball from the opponent's side; solve for lateral velocity by bisection
    def xi(vx):
        from ttagent.ballistics import crossing

        tr = simulate_trajectory(ball((0, 1.4, 0.25), (vx, -5.0, 1.2)), horizon=2.0)
        return crossing(tr.states, 0.001, -1.37)[1][0]

    lo, hi = -3.0, 3.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if xi(mid) < x:
            lo = mid
        else:
            hi = mid
    return ball((0, 1.4, 0.25), (0.5 * (lo + hi), -5.0, 1.2))


@pytest.mark.parametrize("x,side", [(0.0, CENTER), (0.5, FOREHAND), (-0.21, BACKHAND)])
def test_style_side(x, side):
    assert annotate_style_side(_ball_crossing_at(x)) == side


def test_style_side_unclassifiable():
    with pytest.raises(NotClassifiableError):
        annotate_style_side(ball((0, 0.5, 0.3), (0, 3, 1)))


@given(st.tuples(finite, finite, finite), st.tuples(spins, spins, spins))
def test_mirror_is_involution(v, w):
    s = ball((0.3, 1.0, 0.2), v, w)
    assert mirror_state(mirror_state(s)) == s


def test_paddle_normal_must_be_unit():
    with pytest.raises(InvalidStateError):
        PaddleState((0, 0, 0), (0, 2, 0))
