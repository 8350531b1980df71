"""Ball flight, table bounce and paddle contact.

Frame: x lateral (+x is the robot's forehand side), y along the table with the
robot's end at negative y and the net at y = 0, z up with the playing surface at
z = 0. Balls coming from the opponent travel toward -y.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, fields, replace
from functools import cached_property

import numpy as np

from . import _kernels as K
from .errors import InvalidStateError, NotClassifiableError, PreconditionError

TOPSPIN = "topspin"
UNDERSPIN = "underspin"

FOREHAND = "forehand"
CENTER = "center"
BACKHAND = "backhand"


def vec3(x=0.0, y=0.0, z=0.0):
    return np.array([x, y, z], dtype=float)


@dataclass(frozen=True)
class BallState:
    position: np.ndarray
    velocity: np.ndarray
    spin: np.ndarray

    def __post_init__(self):
        for name in ("position", "velocity", "spin"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3))

    @classmethod
    def from_array(cls, arr):
        a = np.asarray(arr, dtype=float)
        return cls(a[0:3].copy(), a[3:6].copy(), a[6:9].copy())

    def to_array(self):
        return np.concatenate([self.position, self.velocity, self.spin])

    @property
    def key6(self):
        return np.concatenate([self.position, self.velocity])

    def is_finite(self):
        return bool(np.all(np.isfinite(self.to_array())))

    def __eq__(self, other):
        if not isinstance(other, BallState):
            return NotImplemented
        return bool(np.array_equal(self.to_array(), other.to_array()))

    __hash__ = None


@dataclass(frozen=True)
class PaddleState:
    position: np.ndarray
    normal: np.ndarray
    velocity: np.ndarray = field(default_factory=vec3)
    angular_velocity: np.ndarray = field(default_factory=vec3)

    def __post_init__(self):
        for f in fields(self):
            object.__setattr__(self, f.name, np.asarray(getattr(self, f.name), dtype=float).reshape(3))
        n = float(np.linalg.norm(self.normal))
        if not math.isfinite(n) or n == 0.0:
            raise InvalidStateError("paddle normal must be a finite nonzero vector")
        if abs(n - 1.0) > 1e-9:
            raise InvalidStateError(f"paddle normal must be unit length (got |n|={n})")


@dataclass(frozen=True)
class FlightParams:
    air_density: float = 1.225
    viscosity: float = 1.8e-5
    blunt_drag: float = 0.235
    slender_drag: float = 0.25
    angular_drag: float = 0.0
    kutta_lift: float = 1.0
    magnus_lift: float = 1.0
    wind: tuple = (0.0, 0.0, 0.0)
    gravity: float = 9.81
    ball_radius: float = 0.02
    ball_mass: float = 0.0027
    dt: float = 0.001

    def __post_init__(self):
        object.__setattr__(self, "wind", tuple(float(w) for w in self.wind))
        if not self.dt > 0:
            raise PreconditionError("dt must be positive")
        if not (self.air_density > 0 and self.ball_radius > 0 and self.ball_mass > 0):
            raise PreconditionError("density, radius and mass must be positive")

    @cached_property
    def packed(self):
        # slender_drag, kutta_lift and viscosity are carried for completeness;
        # for a sphere only blunt drag and Magnus lift enter the force law.
        return np.array(
            [
                self.air_density,
                self.viscosity,
                self.blunt_drag,
                self.slender_drag,
                self.angular_drag,
                self.kutta_lift,
                self.magnus_lift,
                *self.wind,
                self.gravity,
                self.ball_radius,
                self.ball_mass,
                self.dt,
            ]
        )

    def with_dt(self, dt):
        return replace(self, dt=dt)


@dataclass(frozen=True)
class ContactParams:
    table_restitution_normal: float = 0.9
    table_friction: float = 0.1
    table_spin_coupling: float = 1.0
    paddle_restitution_topspin: float = 0.85
    paddle_restitution_underspin: float = 0.6
    paddle_friction: float = 1.5
    paddle_spin_transfer: float = 1.0
    # when False the underspin set is used for every ball
    spin_dependent_paddle: bool = True

    def __post_init__(self):
        for name in ("table_restitution_normal", "paddle_restitution_topspin", "paddle_restitution_underspin"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise PreconditionError(f"{name} must lie in [0, 1] (got {v})")
        for name in ("table_friction", "table_spin_coupling", "paddle_friction", "paddle_spin_transfer"):
            if getattr(self, name) < 0:
                raise PreconditionError(f"{name} must be non-negative")

    @cached_property
    def packed(self):
        return np.array(
            [
                self.table_restitution_normal,
                self.table_friction,
                self.table_spin_coupling,
                self.paddle_restitution_topspin,
                self.paddle_restitution_underspin,
                self.paddle_friction,
                self.paddle_spin_transfer,
                1.0 if self.spin_dependent_paddle else 0.0,
            ]
        )


@dataclass(frozen=True)
class TableGeometry:
    """ITTF table: 2.74 x 1.525 m, net 15.25 cm high overhanging 15.25 cm each side."""

    length: float = 2.74
    width: float = 1.525
    net_height: float = 0.1525
    net_overhang: float = 0.1525
    high_ball_ceiling: float = 2.0
    bound_xy: float = 6.0
    bound_z: float = 8.0

    @property
    def half_length(self):
        return 0.5 * self.length

    @property
    def half_width(self):
        return 0.5 * self.width

    @cached_property
    def packed(self):
        return np.array(
            [
                self.half_length,
                self.half_width,
                self.net_height,
                self.net_overhang,
                self.high_ball_ceiling,
                self.bound_xy,
                self.bound_z,
            ]
        )


DEFAULT_FLIGHT = FlightParams()
DEFAULT_CONTACT = ContactParams()
DEFAULT_TABLE = TableGeometry()

_NO_PADDLE = np.zeros(3)


class BallCategory(enum.Flag):
    NONE = 0
    FAST = enum.auto()
    NORMAL = enum.auto()
    SLOW = enum.auto()
    TOPSPIN = enum.auto()
    NOSPIN = enum.auto()
    UNDERSPIN = enum.auto()
    LOB = enum.auto()

    @classmethod
    def singles(cls):
        return [cls.FAST, cls.NORMAL, cls.SLOW, cls.TOPSPIN, cls.NOSPIN, cls.UNDERSPIN, cls.LOB]

    def names(self):
        return [c.name.lower() for c in BallCategory.singles() if c in self]

    @classmethod
    def from_names(cls, names):
        out = cls.NONE
        for n in names:
            out |= cls[n.upper()]
        return out


SPEED_FAST = 7.0
SPEED_SLOW = 3.5
SPIN_TOP = 50.0
SPIN_UNDER = -25.0
LOB_SPEED = 5.1
LOB_VZ = 2.5


def classify_category(state):
    """Speed, spin and lob labels from the forward speed |v_y| and lateral-axis spin."""
    vy = abs(float(state.velocity[1]))
    vz = float(state.velocity[2])
    wx = float(state.spin[0])
    if vy > SPEED_FAST:
        cat = BallCategory.FAST
    elif vy >= SPEED_SLOW:
        cat = BallCategory.NORMAL
    else:
        cat = BallCategory.SLOW
    if wx > SPIN_TOP:
        cat |= BallCategory.TOPSPIN
    elif wx >= SPIN_UNDER:
        cat |= BallCategory.NOSPIN
    else:
        cat |= BallCategory.UNDERSPIN
    if vy < LOB_SPEED and vz > LOB_VZ:
        cat |= BallCategory.LOB
    return cat


def spin_class(state):
    """Topspin/underspin relative to the direction of travel (no-spin counts as topspin)."""
    return UNDERSPIN if K.is_underspin(state.to_array()) else TOPSPIN


def _check_finite(state):
    if not state.is_finite():
        raise InvalidStateError("ball state has non-finite components")


def step_flight(state, params=DEFAULT_FLIGHT):
    _check_finite(state)
    return BallState.from_array(K.flight_step(state.to_array(), params.packed, params.dt))


def aero_forces(state, params=DEFAULT_FLIGHT):
    """Drag and Magnus forces (N) acting on the ball, returned separately."""
    rel = state.velocity - np.asarray(params.wind)
    r = params.ball_radius
    drag = -0.5 * params.air_density * params.blunt_drag * math.pi * r * r * np.linalg.norm(rel) * rel
    magnus = params.magnus_lift * params.air_density * (4.0 / 3.0) * math.pi * r**3 * np.cross(state.spin, rel)
    return drag, magnus


def bounce_table(state, params=DEFAULT_CONTACT, radius=0.02, table=DEFAULT_TABLE, tol=5e-3):
    _check_finite(state)
    if state.velocity[2] >= 0:
        raise PreconditionError("bounce_table needs a ball moving down (velocity.z < 0)")
    if abs(state.position[2] - radius) > tol:
        raise PreconditionError("ball is not at table height")
    if abs(state.position[0]) > table.half_width or abs(state.position[1]) > table.half_length:
        raise PreconditionError("ball is not over the table")
    return BallState.from_array(K.bounce_table(state.to_array(), params.packed, radius))


def contact_paddle(ball, paddle, params=DEFAULT_CONTACT, incoming_spin_class=TOPSPIN, radius=0.02, reach=0.01):
    """Impulse contact between ball and paddle; restitution chosen by incoming spin class.

    The paddle is two-sided: the face hit is the one on the ball's side of the plane.
    """
    _check_finite(ball)
    d = float(np.dot(ball.position - paddle.position, paddle.normal))
    if abs(d) > radius + reach:
        raise PreconditionError(f"ball is {abs(d):.4f} m from the paddle plane, out of contact range")
    cp = replace(params, spin_dependent_paddle=True).packed
    out, ok = K.paddle_contact(
        ball.to_array(),
        paddle.position,
        paddle.normal,
        paddle.velocity,
        paddle.angular_velocity,
        cp,
        radius,
        incoming_spin_class == UNDERSPIN,
    )
    if not ok:
        raise PreconditionError("ball is moving away from the paddle")
    return BallState.from_array(out)


EVENT_NAMES = {
    K.EV_BOUNCE: "bounce",
    K.EV_NET_CROSS: "net_cross",
    K.EV_NET_FAULT: "net_fault",
    K.EV_OUT: "out_of_play",
    K.EV_HIGH: "high_ball",
    K.EV_PADDLE: "paddle_contact",
    K.EV_PADDLE_PASS: "paddle_pass",
}


@dataclass(frozen=True)
class TrajectoryEvent:
    kind: str
    t: float
    position: np.ndarray

    @property
    def side(self):
        if self.position[1] < 0:
            return "robot"
        if self.position[1] > 0:
            return "opponent"
        return "net"


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    events: list
    end: str

    @property
    def bounces(self):
        return [e for e in self.events if e.kind == "bounce"]

    @property
    def landing_point(self):
        b = self.bounces
        return None if not b else b[0].position[:2].copy()

    @property
    def net_fault(self):
        return any(e.kind == "net_fault" for e in self.events)

    @property
    def out_of_play(self):
        return self.end in ("out_of_play", "net_fault")

    def net_crossing_height(self):
        for e in self.events:
            if e.kind in ("net_cross", "net_fault"):
                return float(e.position[2])
        return None

    def max_height(self):
        return float(self.states[:, 2].max())

    def state_at(self, i):
        return BallState.from_array(self.states[i])

    def to_rows(self):
        """Delimited export rows: t, position, velocity, spin, event."""
        tags = {}
        for e in self.events:
            i = int(round(e.t / (self.times[1] - self.times[0]))) if len(self.times) > 1 else 0
            tags.setdefault(min(i, len(self.times) - 1), []).append(e.kind)
        rows = []
        for i, (t, s) in enumerate(zip(self.times, self.states)):
            rows.append([float(t), *map(float, s), "|".join(tags.get(i, []))])
        return rows


def _events(ev, n_ev):
    out = []
    for i in range(n_ev):
        code = int(ev[i, 0])
        out.append(TrajectoryEvent(EVENT_NAMES[code], float(ev[i, 2]), ev[i, 3:6].copy()))
    return out


_END_NAMES = {K.END_HORIZON: "horizon", K.END_OUT: "out_of_play", K.END_NET: "net_fault", K.END_BOUNCES: "bounces"}


def simulate_trajectory(
    initial,
    flight=DEFAULT_FLIGHT,
    contact=DEFAULT_CONTACT,
    horizon=2.0,
    table=DEFAULT_TABLE,
    stop_bounces=0,
    t0=0.0,
):
    if not horizon > 0:
        raise PreconditionError("horizon must be positive")
    _check_finite(initial)
    n = int(math.ceil(horizon / flight.dt - 1e-9))
    states, n_rec, ev, n_ev, steps, end, _ = K.rollout(
        initial.to_array(),
        flight.packed,
        contact.packed,
        table.packed,
        n,
        stop_bounces,
        False,
        _NO_PADDLE,
        _NO_PADDLE,
        _NO_PADDLE,
        _NO_PADDLE,
        0.0,
        True,
    )
    times = t0 + flight.dt * np.arange(n_rec)
    events = _events(ev, n_ev)
    for e in events:
        object.__setattr__(e, "t", e.t + t0)
    return Trajectory(times, states, events, _END_NAMES[end])


def first_bounce(initial_arr, flight=DEFAULT_FLIGHT, contact=DEFAULT_CONTACT, table=DEFAULT_TABLE, horizon=3.0):
    """(landing xy or None, net-crossing height or None, end reason) from a packed state."""
    n = int(horizon / flight.dt)
    _, _, ev, n_ev, _, end, _ = K.rollout(
        initial_arr,
        flight.packed,
        contact.packed,
        table.packed,
        n,
        1,
        False,
        _NO_PADDLE,
        _NO_PADDLE,
        _NO_PADDLE,
        _NO_PADDLE,
        0.0,
        False,
    )
    land = None
    net_z = None
    for i in range(n_ev):
        code = int(ev[i, 0])
        if code == K.EV_BOUNCE and land is None:
            land = ev[i, 3:5].copy()
        elif code in (K.EV_NET_CROSS, K.EV_NET_FAULT) and net_z is None:
            net_z = float(ev[i, 5])
    return land, net_z, _END_NAMES[end]


def crossing(traj_states, dt, plane_y, after_bounce=False, t0=0.0):
    """First crossing of y = plane_y as (t, interpolated state) or None."""
    s = traj_states
    y = s[:, 1]
    start = 0
    if after_bounce:
        vz = s[:, 5]
        flips = np.nonzero((vz[:-1] < 0) & (vz[1:] > 0))[0]
        if len(flips) == 0:
            return None
        start = int(flips[0]) + 1
    d = y[start:] - plane_y
    idx = np.nonzero(np.sign(d[:-1]) != np.sign(d[1:]))[0]
    if len(idx) == 0:
        return None
    i = start + int(idx[0])
    a, b = d[i - start], d[i - start + 1]
    w = a / (a - b) if a != b else 0.0
    st = s[i] + w * (s[i + 1] - s[i])
    return t0 + (i + w) * dt, st


def annotate_style_side(initial, flight=DEFAULT_FLIGHT, contact=DEFAULT_CONTACT, table=DEFAULT_TABLE, band=0.2, forehand_sign=1.0):
    """Forehand / center / backhand from where the ball crosses the robot's back-of-table line."""
    traj = simulate_trajectory(initial, flight, contact, horizon=3.0, table=table)
    hit = crossing(traj.states, flight.dt, -table.half_length)
    if hit is None:
        raise NotClassifiableError("trajectory never reaches the robot's back-of-table line")
    x = forehand_sign * float(hit[1][0])
    if x > band:
        return FOREHAND
    if x < -band:
        return BACKHAND
    return CENTER


def mirror_state(state):
    """Reflect across the x = 0 plane; spin is a pseudovector so only wx keeps its sign."""
    a = state.to_array().copy()
    a[0] = -a[0]
    a[3] = -a[3]
    a[7] = -a[7]
    a[8] = -a[8]
    return BallState.from_array(a)


def aim(
    position,
    spin,
    forward_speed,
    target_xy,
    flight=DEFAULT_FLIGHT,
    contact=DEFAULT_CONTACT,
    table=DEFAULT_TABLE,
    direction=1.0,
    iters=12,
    tol=2e-3,
    vz0=None,
):
    """Solve (vx, vz) so the first bounce lands on target_xy with |vy| = forward_speed.

    Newton iterations with a finite-difference Jacobian on the full flight model.
    Returns (velocity, landing error in m). Error is inf when no bounce is found.
    """
    p = np.asarray(position, dtype=float)
    w = np.asarray(spin, dtype=float)
    tx, ty = float(target_xy[0]), float(target_xy[1])
    vy = direction * abs(forward_speed)
    T = abs((ty - p[1]) / vy) if vy != 0 else 0.5
    vx = (tx - p[0]) / max(T, 1e-3)
    if vz0 is None:
        vz = (flight.ball_radius - p[2]) / max(T, 1e-3) + 0.5 * flight.gravity * T
    else:
        vz = vz0
    buf = np.concatenate([p, [0.0, vy, 0.0], w])

    short = [False]

    def land(vx_, vz_):
        buf[3] = vx_
        buf[5] = vz_
        xy, _, end = first_bounce(buf, flight, contact, table)
        short[0] = end == "net_fault"
        return xy

    best = (np.array([vx, vy, vz]), math.inf)
    h = 1e-3
    for _ in range(iters):
        xy = land(vx, vz)
        if xy is None:
            # into the net: lift; past the table: drop
            vz += 0.3 if short[0] else -0.3
            continue
        err = np.array([xy[0] - tx, xy[1] - ty])
        e = float(np.hypot(*err))
        if e < best[1]:
            best = (np.array([vx, vy, vz]), e)
        if e < tol:
            break
        a = land(vx + h, vz)
        b = land(vx, vz + h)
        if a is None or b is None:
            vz += 0.1
            continue
        J = np.column_stack([(a - xy) / h, (b - xy) / h])
        try:
            step = np.linalg.solve(J, err)
        except np.linalg.LinAlgError:
            break
        # landing y is monotone in vz near the solution; limit wild steps
        step = np.clip(step, -2.0, 2.0)
        vx -= step[0]
        vz -= step[1]
    return best
