"""Low-level skills: stroke planning, shot execution at 50 Hz, rewards, FiLM and a trainable policy skill."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels as K
from .ballistics import (
    BACKHAND,
    DEFAULT_CONTACT,
    DEFAULT_FLIGHT,
    DEFAULT_TABLE,
    FOREHAND,
    TOPSPIN,
    UNDERSPIN,
    BallState,
    ContactParams,
    aim,
)
from .errors import DivergenceError, PreconditionError
from .optimizer import EsConfig, RunningNormalizer, es_step_info, normalize

TICK = 0.02

GENERALIST = "generalist"
TARGET_LEFT = "target_left"
TARGET_RIGHT = "target_right"
FAST_HIT = "fast_hit"
TOPSPIN_SERVE = "topspin_serve"
UNDERSPIN_SERVE = "underspin_serve"
KINDS = (GENERALIST, TARGET_LEFT, TARGET_RIGHT, FAST_HIT, TOPSPIN_SERVE, UNDERSPIN_SERVE)

# spin the planner assumes for the incoming ball, by preset
ASSUMED_SPIN = {TOPSPIN: 60.0, UNDERSPIN: -40.0}

LAND = "land"
HIT = "hit"
MISS = "miss"
NO_PLAY = "no_play"


@dataclass(frozen=True)
class SkillSpec:
    id: int
    name: str
    style: str
    kind: str
    is_serve_receiver: bool
    target_landing: tuple
    target_speed: float
    execution_noise: tuple = (0.1, 0.02)  # (swing velocity m/s, normal rad)
    spin_preset: str = UNDERSPIN
    hit_plane_y: float = -1.6

    def __post_init__(self):
        if self.style not in (FOREHAND, BACKHAND):
            raise PreconditionError(f"style must be forehand or backhand, got {self.style!r}")
        if self.kind not in KINDS:
            raise PreconditionError(f"unknown skill kind {self.kind!r}")
        if self.spin_preset not in (TOPSPIN, UNDERSPIN):
            raise PreconditionError("spin_preset must be topspin or underspin")
        x, y = self.target_landing
        if not (0.0 < y < DEFAULT_TABLE.half_length and abs(x) < DEFAULT_TABLE.half_width):
            raise PreconditionError(f"target {self.target_landing} is not on the opponent half")

    def to_dict(self):
        d = dict(self.__dict__)
        d["target_landing"] = list(self.target_landing)
        d["execution_noise"] = list(self.execution_noise)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["target_landing"] = tuple(d["target_landing"])
        d["execution_noise"] = tuple(d["execution_noise"])
        return cls(**d)


def _spec(i, name, style, kind, target, speed, noise, preset, plane, serve=False):
    return SkillSpec(i, name, style, kind, serve, tuple(target), speed, tuple(noise), preset, plane)


def default_roster():
    """13 rally skills and 4 serve receivers with distinct targets, speeds, noise and spin presets."""
    FH, BH = FOREHAND, BACKHAND
    T, U = TOPSPIN, UNDERSPIN
    return [
        _spec(0, "fh_generalist_top", FH, GENERALIST, (0.0, 0.85), 5.0, (0.10, 0.02), T, -1.6),
        _spec(1, "fh_generalist", FH, GENERALIST, (0.0, 0.80), 4.5, (0.10, 0.02), U, -1.6),
        _spec(2, "fh_left", FH, TARGET_LEFT, (-0.45, 0.90), 5.0, (0.12, 0.02), T, -1.6),
        _spec(3, "fh_right", FH, TARGET_RIGHT, (0.45, 0.90), 5.0, (0.12, 0.02), U, -1.6),
        _spec(4, "fh_fast", FH, FAST_HIT, (0.10, 1.00), 7.5, (0.25, 0.035), T, -1.5),
        _spec(5, "fh_deep", FH, GENERALIST, (0.0, 1.05), 4.0, (0.08, 0.015), U, -1.7),
        _spec(6, "fh_left_short", FH, TARGET_LEFT, (-0.50, 0.60), 4.0, (0.12, 0.025), U, -1.6),
        _spec(7, "bh_generalist_top", BH, GENERALIST, (0.0, 0.85), 5.0, (0.10, 0.02), T, -1.6),
        _spec(8, "bh_generalist", BH, GENERALIST, (0.0, 0.80), 4.5, (0.10, 0.02), U, -1.6),
        _spec(9, "bh_left", BH, TARGET_LEFT, (-0.45, 0.90), 5.0, (0.12, 0.02), U, -1.6),
        _spec(10, "bh_right", BH, TARGET_RIGHT, (0.45, 0.90), 5.0, (0.12, 0.02), T, -1.6),
        _spec(11, "bh_fast", BH, FAST_HIT, (-0.10, 1.00), 7.5, (0.25, 0.035), T, -1.5),
        _spec(12, "bh_deep", BH, GENERALIST, (0.0, 1.05), 4.0, (0.08, 0.015), U, -1.7),
        _spec(13, "fh_serve_top", FH, TOPSPIN_SERVE, (0.0, 0.80), 4.0, (0.08, 0.015), T, -1.5, True),
        _spec(14, "fh_serve_under", FH, UNDERSPIN_SERVE, (0.0, 0.80), 4.0, (0.08, 0.015), U, -1.5, True),
        _spec(15, "bh_serve_top", BH, TOPSPIN_SERVE, (0.0, 0.80), 4.0, (0.08, 0.015), T, -1.5, True),
        _spec(16, "bh_serve_under", BH, UNDERSPIN_SERVE, (0.0, 0.80), 4.0, (0.08, 0.015), U, -1.5, True),
    ]


@dataclass(frozen=True)
class SkillEnv:
    """Physics, actuator limits and sensing shared by every skill."""

    flight: object = DEFAULT_FLIGHT
    contact: ContactParams = DEFAULT_CONTACT
    table: object = DEFAULT_TABLE
    home_position: tuple = (0.0, -1.75, 0.25)
    home_normal: tuple = (0.0, 1.0, 0.0)
    paddle_radius: float = 0.075
    max_speed: float = 3.0
    max_accel: float = 25.0
    max_swing_speed: float = 9.0
    max_angular_speed: float = 12.0
    forehand_reach: tuple = (-0.35, 1.2)
    backhand_reach: tuple = (-1.2, 0.3)
    z_reach: tuple = (0.0, 0.9)
    obs_noise_position: float = 0.004
    obs_noise_velocity: float = 0.06
    commit_lead: float = 0.12
    intercept_window: int = 5
    ball_delay_ticks: int = 2
    action_delay_ticks: int = 4

    @property
    def home(self):
        return np.array(self.home_position), np.array(self.home_normal)

    def reach(self, style):
        return self.forehand_reach if style == FOREHAND else self.backhand_reach

    @classmethod
    def from_config(cls, cfg, flight=None, contact=None, table=None):
        s = cfg["skills"]
        kw = dict(
            home_position=tuple(s["home_position"]),
            home_normal=tuple(s["home_normal"]),
            paddle_radius=s["paddle_radius"],
            max_speed=s["max_speed"],
            max_accel=s["max_accel"],
            max_angular_speed=s["max_angular_speed"],
            forehand_reach=tuple(s["forehand_reach"]),
            backhand_reach=tuple(s["backhand_reach"]),
            obs_noise_position=s["observation_noise"]["position"],
            obs_noise_velocity=s["observation_noise"]["velocity"],
            ball_delay_ticks=int(round(cfg["latency_ms"]["ball_obs"][0] / 1000 / TICK)),
            action_delay_ticks=int(round(cfg["latency_ms"]["action"][0] / 1000 / TICK)),
        )
        for k, v in (("flight", flight), ("contact", contact), ("table", table)):
            if v is not None:
                kw[k] = v
        return cls(**kw)


@dataclass(frozen=True)
class PaddleCommand:
    linear: np.ndarray
    angular: np.ndarray
    reachable: bool = True
    swing: bool = False


@dataclass(frozen=True)
class ContactPlan:
    position: np.ndarray
    normal: np.ndarray
    velocity: np.ndarray
    ok: bool = True


_ZERO3 = np.zeros(3)


def _rollout(arr, env, horizon=2.0, contact=None):
    n = int(horizon / env.flight.dt)
    c = (contact or env.contact).packed
    return K.rollout(arr, env.flight.packed, c, env.table.packed, n, 2, False,
                     _ZERO3, _ZERO3, _ZERO3, _ZERO3, 0.0, True)


CONTACT_LOW_Z = 0.15


def _robot_bounce_step(ev, n_ev, dt):
    """Sample index just after the first robot-half bounce, or -1."""
    for i in range(n_ev):
        code = int(ev[i, 0])
        if code == K.EV_BOUNCE:
            return int(math.ceil(ev[i, 2] / dt)) if ev[i, 4] < 0 else -1
        if code == K.EV_NET_FAULT:
            return -1
    return -1


def _contact_index(seg, plane_y):
    """Fractional index where the post-bounce path crosses the plane or drops to CONTACT_LOW_Z."""
    y, z, vz = seg[:, 1], seg[:, 2], seg[:, 5]
    cross = np.nonzero((y[:-1] > plane_y) & (y[1:] <= plane_y))[0]
    low = np.nonzero((vz[:-1] < 0) & (z[:-1] > CONTACT_LOW_Z) & (z[1:] <= CONTACT_LOW_Z))[0]
    c = int(cross[0]) if len(cross) else None
    d = int(low[0]) if len(low) else None
    if c is not None and (d is None or c <= d):
        a, b = y[c] - plane_y, y[c + 1] - plane_y
        return c + a / (a - b)
    if d is not None:
        a, b = z[d] - CONTACT_LOW_Z, z[d + 1] - CONTACT_LOW_Z
        return d + a / (a - b)
    return None


def contact_point(arr, plane_y, env, horizon=2.0, contact=None):
    """Where a ball bound for the robot is met after its first bounce.

    That is the first of crossing the hitting plane and descending to
    CONTACT_LOW_Z. Returns (time, packed state) or None when the ball never
    bounces on the robot half.
    """
    states, n_rec, ev, n_ev, _, _, _ = _rollout(np.asarray(arr, dtype=float), env, horizon, contact)
    b_step = _robot_bounce_step(ev, n_ev, env.flight.dt)
    if b_step < 0 or b_step >= n_rec - 1:
        return None
    seg = states[b_step:n_rec]
    f = _contact_index(seg, plane_y)
    if f is None:
        return None
    i = min(int(f), len(seg) - 2)
    w = f - i
    st = seg[i] + w * (seg[i + 1] - seg[i])
    return (b_step + f) * env.flight.dt, st


def assumed_state(arr, preset):
    a = np.array(arr, dtype=float)
    a[6:9] = (ASSUMED_SPIN[preset], 0.0, 0.0)
    return a


def _assumed_contact(env, preset):
    c = env.contact
    e = c.paddle_restitution_topspin if preset == TOPSPIN else c.paddle_restitution_underspin
    return replace(c, paddle_restitution_topspin=e, paddle_restitution_underspin=e)


def plan_contact(spec, ball_at_plane, env, iters=3):
    """Invert the contact model: paddle normal and velocity that send the ball to the target.

    Frictionless closed form for the seed (normal along v_out - v_in), then fixed-point
    corrections through the full contact law using the skill's assumed spin and
    restitution set.
    """
    s = np.array(ball_at_plane, dtype=float)
    cp = _assumed_contact(env, spec.spin_preset)
    packed = cp.packed
    pos = s[0:3]
    v_in = s[3:6]
    e = cp.paddle_restitution_topspin
    r = env.flight.ball_radius
    w_out = np.zeros(3)
    correction = np.zeros(3)
    normal = np.array(env.home_normal, dtype=float)
    v_p = np.zeros(3)
    ok = False
    for _ in range(iters):
        v_want, err = aim(pos, w_out, spec.target_speed, spec.target_landing, env.flight, env.contact, env.table, direction=1.0)
        if not math.isfinite(err):
            break
        goal = v_want + correction
        d = goal - v_in
        nd = np.linalg.norm(d)
        if nd < 1e-9:
            break
        normal = d / nd
        vpn = (goal @ normal + e * (v_in @ normal)) / (1.0 + e)
        v_p = vpn * normal
        out, good = K.paddle_contact(s, pos - normal * r, normal, v_p, _ZERO3, packed, r, False)
        if not good:
            break
        correction = correction + (v_want - out[3:6])
        w_out = out[6:9]
        ok = err < 0.05
    if np.linalg.norm(v_p) > env.max_swing_speed:
        v_p = v_p * (env.max_swing_speed / np.linalg.norm(v_p))
    return ContactPlan(pos.copy(), normal, v_p, ok)


def _clip_reach(p, style, env):
    lo, hi = env.reach(style)
    q = p.copy()
    q[0] = min(max(q[0], lo), hi)
    q[2] = min(max(q[2], env.z_reach[0]), env.z_reach[1])
    return q


def _track_velocity(pos, vel, target, env, dt=TICK):
    """Velocity command that closes on ``target`` under speed and acceleration limits."""
    d = target - pos
    dist = float(np.linalg.norm(d))
    if dist < 1e-9:
        want = np.zeros(3)
    else:
        speed = min(env.max_speed, math.sqrt(2.0 * env.max_accel * dist), dist / dt)
        want = d / dist * speed
    dv = want - vel
    n = float(np.linalg.norm(dv))
    lim = env.max_accel * dt
    if n > lim:
        dv = dv * (lim / n)
    return vel + dv


def clamp_command(linear, angular, env, swing=False):
    lim = env.max_swing_speed if swing else env.max_speed
    lin = np.asarray(linear, dtype=float)
    ang = np.asarray(angular, dtype=float)
    n = float(np.linalg.norm(lin))
    if not math.isfinite(n):
        lin = np.zeros(3)
    elif n > lim:
        lin = lin * (lim / n)
    a = float(np.linalg.norm(ang))
    if not math.isfinite(a):
        ang = np.zeros(3)
    elif a > env.max_angular_speed:
        ang = ang * (env.max_angular_speed / a)
    return lin, ang


def plan_stroke(spec, ball, paddle, t, env=None, paddle_velocity=None, plan=None):
    """One 50 Hz command: move toward the predicted intercept, swing when contact is due.

    ``ball`` is the current (possibly delayed) observation; spin is not observed,
    the skill's preset spin is assumed instead.
    """
    env = env or SkillEnv()
    arr = assumed_state(ball.to_array(), spec.spin_preset)
    if arr[1] <= spec.hit_plane_y or arr[4] >= 0:
        return PaddleCommand(np.zeros(3), np.zeros(3), reachable=False)
    cp = contact_point(ball.to_array() * np.r_[np.ones(6), np.zeros(3)], spec.hit_plane_y, env)
    if cp is None:
        return PaddleCommand(np.zeros(3), np.zeros(3), reachable=False)
    t_c, st = cp
    target = st[0:3]
    lo, hi = env.reach(spec.style)
    reachable = lo <= target[0] <= hi and env.z_reach[0] <= target[2] <= env.z_reach[1]
    goal = _clip_reach(target, spec.style, env)
    vel = np.zeros(3) if paddle_velocity is None else np.asarray(paddle_velocity, dtype=float)
    if plan is not None and t_c <= TICK:
        lin, ang = clamp_command(plan.velocity, np.zeros(3), env, swing=True)
        return PaddleCommand(lin, ang, reachable, swing=True)
    lin = _track_velocity(paddle.position, vel, goal, env)
    ang = np.zeros(3)
    if plan is not None:
        axis = np.cross(paddle.normal, plan.normal)
        s = float(np.linalg.norm(axis))
        if s > 1e-12:
            angle = math.atan2(s, float(paddle.normal @ plan.normal))
            ang = axis / s * min(env.max_angular_speed, angle / TICK)
    lin, ang = clamp_command(lin, ang, env)
    return PaddleCommand(lin, ang, reachable)


def _rotate_toward(n0, n1, max_angle):
    c = float(np.clip(n0 @ n1, -1.0, 1.0))
    ang = math.acos(c)
    if ang <= max_angle or ang < 1e-12:
        return n1.copy()
    axis = np.cross(n0, n1)
    s = np.linalg.norm(axis)
    if s < 1e-12:
        return n0.copy()
    axis /= s
    a = max_angle
    return n0 * math.cos(a) + np.cross(axis, n0) * math.sin(a) + axis * (axis @ n0) * (1 - math.cos(a))


def _perturb_normal(n, sigma, rng):
    if sigma <= 0:
        return n
    q = n + rng.normal(0.0, sigma, 3)
    return q / np.linalg.norm(q)


@dataclass
class ShotResult:
    outcome: str
    skill_id: int
    landing: np.ndarray = None
    hit_velocity_y: float = float("nan")
    net_height: float = None
    high_ball: bool = False
    outgoing: np.ndarray = None
    contact_time: float = None
    transcript: dict = field(default_factory=dict)

    @property
    def landed(self):
        return self.outcome == LAND

    @property
    def contacted(self):
        return self.outcome in (LAND, HIT)


SPIN_WINDOW_TICKS = 3


class TickNoise:
    """Unit-normal observation noise drawn up front, one row per control tick.

    Fixing the noise by tick keeps observations identical across settings that
    differ only in when they start reading them.
    """

    def __init__(self, rng, ticks=160, offset=SPIN_WINDOW_TICKS):
        self.z = rng.standard_normal((ticks + offset, 6))
        self.offset = offset

    def row(self, k):
        return self.z[min(max(k + self.offset, 0), len(self.z) - 1)]


def _observe(states, k_tick, delay, env, rng):
    """Observed packed state at tick k (true state ``delay`` ticks old, plus noise).

    ``rng`` is a Generator, a TickNoise or None for a noise-free observation.
    """
    idx = int(round((k_tick - delay) * TICK / env.flight.dt))
    idx = min(max(idx, 0), len(states) - 1)
    s = states[idx].copy()
    if isinstance(rng, TickNoise):
        z = rng.row(k_tick)
        s[0:3] += env.obs_noise_position * z[0:3]
        s[3:6] += env.obs_noise_velocity * z[3:6]
    elif rng is not None:
        s[0:3] += rng.normal(0.0, env.obs_noise_position, 3)
        s[3:6] += rng.normal(0.0, env.obs_noise_velocity, 3)
    s[6:9] = 0.0
    return s, idx * env.flight.dt


def estimate_spin(prev, cur, dt, flight):
    """Spin component normal to the velocity, from the curvature between two observations.

    Returns zeros when a bounce lies between them (vertical velocity flips upward).
    """
    if prev[5] < 0 <= cur[5] or dt <= 0:
        return np.zeros(3)
    v = 0.5 * (prev[3:6] + cur[3:6])
    speed2 = float(v @ v)
    if speed2 < 1e-6:
        return np.zeros(3)
    a = (cur[3:6] - prev[3:6]) / dt
    ax, ay, az = K.accel(v[0], v[1], v[2], 0.0, 0.0, 0.0, flight.packed)
    res = a - np.array([ax, ay, az])
    km = flight.magnus_lift * flight.air_density * (4.0 / 3.0) * math.pi * flight.ball_radius**3 / flight.ball_mass
    w = np.array([v[1] * res[2] - v[2] * res[1], v[2] * res[0] - v[0] * res[2], v[0] * res[1] - v[1] * res[0]])
    w /= km * speed2
    n = float(np.linalg.norm(w))
    return w * (400.0 / n) if n > 400.0 else w


SPIN_WINDOW = SPIN_WINDOW_TICKS


def _observe_spin(states, k, delay, env, rng):
    """Delayed noisy observation with spin estimated from a SPIN_WINDOW-tick baseline."""
    cur, t1 = _observe(states, k, delay, env, rng)
    prev, t0 = _observe(states, k - SPIN_WINDOW, delay, env, rng)
    cur[6:9] = estimate_spin(prev, cur, t1 - t0, env.flight)
    return cur, t1


def outgoing_outcome(out_arr, env):
    """Landing, net height and high-ball flag for a ball leaving the paddle."""
    n = int(3.0 / env.flight.dt)
    _, _, ev, n_ev, _, end, final = K.rollout(out_arr, env.flight.packed, env.contact.packed, env.table.packed,
                                              n, 1, False, _ZERO3, _ZERO3, _ZERO3, _ZERO3, 0.0, False)
    land = None
    net_z = None
    high = False
    first = None
    for i in range(n_ev):
        code = int(ev[i, 0])
        if code == K.EV_BOUNCE and first is None:
            first = ev[i, 3:5].copy()
        elif code in (K.EV_NET_CROSS, K.EV_NET_FAULT) and net_z is None:
            net_z = float(ev[i, 5])
        elif code == K.EV_HIGH:
            high = True
    if first is None:
        first = final[0:2].copy()
    elif first[1] > 0 and net_z is not None:
        land = first
    return land, first, net_z, high


@dataclass
class ShotContext:
    """Everything about a shot that does not depend on the stroke: tracking, timing and the contact state."""

    spec: SkillSpec
    skill: object
    contact_time: float
    ball_at_contact: np.ndarray
    estimate: np.ndarray
    reach_ok: bool
    rotation_budget: float
    transcript: dict


def _filtered_intercept(states, k, delay, plane_y, env, obs_rng, cache):
    """Mean predicted contact point over the last ``intercept_window`` observations.

    Each prediction depends only on its own tick, so the estimate at tick k is the
    same whenever the skill started reading it.
    """
    pts = []
    for j in range(max(delay + 1, k - env.intercept_window + 1), k + 1):
        key = (j, plane_y)
        if key not in cache:
            obs, _ = _observe_spin(states, j, delay, env, obs_rng)
            pred = contact_point(obs, plane_y, env, horizon=1.0)
            cache[key] = None if pred is None else pred[1][0:3]
        if cache[key] is not None:
            pts.append(cache[key])
    return np.mean(pts, axis=0) if pts else None


def prepare_shot(skill, incoming, env=None, rng=None, decide_tick=1, switches=None, obs_noise=True):
    """Run positioning for one incoming ball. Returns a ShotContext, or None if there is nothing to play.

    Timeline in control ticks from the opponent's hit: the hit is seen after the
    ball-observation delay, the decision comes ``decide_tick`` ticks later, and
    commands act after the action delay. ``switches`` maps tick -> skill for
    re-deciding controllers; a change of style routes the paddle back through home.
    """
    env = env or SkillEnv()
    rng = rng if rng is not None else np.random.default_rng(0)
    arr = incoming.to_array() if isinstance(incoming, BallState) else np.asarray(incoming, dtype=float)
    states, n_rec, ev, n_ev, _, _, _ = _rollout(arr, env, 2.5)
    states = states[:n_rec]
    b_step = _robot_bounce_step(ev, n_ev, env.flight.dt)
    skills = {decide_tick: skill}
    if switches:
        skills.update(switches)
    final_skill = skills[max(skills)]
    spec = final_skill.spec
    truth = contact_point(arr, spec.hit_plane_y, env)
    if truth is None or b_step < 0:
        return None
    t_c, _ = truth
    Lb, La = env.ball_delay_ticks, env.action_delay_ticks
    d0 = Lb + decide_tick
    # a decision that comes after the ball has gone by cannot move the paddle in time
    late = (d0 + La) * TICK >= t_c
    obs_rng = TickNoise(rng) if obs_noise else None
    home_p, home_n = env.home
    # positioning loop; commands act La ticks after they are issued
    p = home_p.copy()
    queue = deque([np.zeros(3)] * La)
    last_cmd = np.zeros(3)
    positions = [p.copy()]
    commands = [np.zeros(3)]
    active = None
    goal = None
    via_home = False
    pred_cache = {}
    for k in range(0, int(math.floor(t_c / TICK)) + 1):
        step = min(TICK, t_c - k * TICK)
        if step <= 0:
            break
        v = queue.popleft() if La else last_cmd
        rel = k - Lb
        if rel in skills:
            new = skills[rel]
            if active is not None and new.spec.style != active.spec.style:
                via_home = True
            active = new
        if active is not None and k >= d0:
            p_future = p + TICK * (v + sum(queue, np.zeros(3)))
            if via_home:
                goal = home_p
                if np.linalg.norm(p_future - home_p) < 0.05:
                    via_home = False
            else:
                pred = _filtered_intercept(states, k, Lb, active.spec.hit_plane_y, env, obs_rng, pred_cache)
                if pred is not None:
                    goal = _clip_reach(pred, active.spec.style, env)
                elif goal is None:
                    goal = p_future
            last_cmd = _track_velocity(p_future, last_cmd, goal, env)
        if La:
            queue.append(last_cmd.copy())
        commands.append(v.copy())
        p = p + v * step
        positions.append(p.copy())
    # the stroke is planned at the last tick at least commit_lead before contact
    k_commit = max(d0, int(math.floor((t_c - env.commit_lead) / TICK)))
    obs, _ = _observe_spin(states, k_commit, Lb, env, obs_rng)
    pred = contact_point(obs, spec.hit_plane_y, env, horizon=1.5)
    # the ball meets the paddle wherever its post-bounce path passes closest
    path = states[b_step:]
    second = np.nonzero((path[1:, 2] <= env.flight.ball_radius + 1e-9) & (path[1:, 5] > 0) & (path[:-1, 5] <= 0))[0]
    if len(second):
        path = path[: int(second[0]) + 1]
    dist = np.linalg.norm(path[:, 0:3] - p, axis=1)
    j = int(np.argmin(dist))
    ball_c = path[j].copy()
    est = pred[1] if pred is not None else ball_c
    pos = np.array(positions)
    transcript = {
        "style": spec.style,
        "positions": pos,
        "commands": np.array(commands),
        "collision_steps": int(np.sum(pos[:, 2] < -0.02)),
        "low_steps": int(np.sum(pos[:, 2] < 0.0)),
        "contact": False,
        "landed": False,
        "net_height": None,
        "commit_tick": k_commit,
        "decide_tick": d0,
    }
    reach_ok = float(dist[j]) <= env.paddle_radius and not late
    return ShotContext(spec, final_skill, t_c, ball_c, est, reach_ok,
                       env.max_angular_speed * max(0.0, t_c - (d0 + La) * TICK), transcript)


def contact_pitch(normal):
    return math.atan2(normal[2], normal[1])


def finish_shot(ctx, plan, env=None, rng=None, reps=1, contact_pitch_target=-0.12):
    """Apply ``plan`` with execution noise to a prepared shot. Returns a list of ``reps`` results."""
    env = env or SkillEnv()
    rng = rng if rng is not None else np.random.default_rng(0)
    spec = ctx.spec
    home_n = np.array(env.home_normal, dtype=float)
    normal = _rotate_toward(home_n, plan.normal, ctx.rotation_budget)
    sv, sn = spec.execution_noise
    ball_c = ctx.ball_at_contact
    underspin = bool(K.is_underspin(ball_c))
    results = []
    for _ in range(reps):
        n_hit = _perturb_normal(normal, sn, rng)
        v_hit = plan.velocity + rng.normal(0.0, sv, 3) if sv > 0 else plan.velocity
        tr = dict(ctx.transcript)
        tr["contact_normal"] = n_hit
        tr["contact_angle_error"] = abs(contact_pitch(n_hit) - contact_pitch_target)
        if not ctx.reach_ok:
            results.append(ShotResult(MISS, spec.id, contact_time=ctx.contact_time, transcript=tr))
            continue
        out, ok = K.paddle_contact(ball_c, ball_c[0:3] - n_hit * env.flight.ball_radius, n_hit, v_hit, _ZERO3,
                                   env.contact.packed, env.flight.ball_radius, underspin)
        if not ok:
            results.append(ShotResult(MISS, spec.id, contact_time=ctx.contact_time, transcript=tr))
            continue
        land, first, net_z, high = outgoing_outcome(out, env)
        tr["contact"] = True
        tr["landed"] = land is not None
        tr["net_height"] = net_z
        results.append(
            ShotResult(
                LAND if land is not None else HIT,
                spec.id,
                landing=first,
                hit_velocity_y=float(out[4]),
                net_height=net_z,
                high_ball=high,
                outgoing=out,
                contact_time=ctx.contact_time,
                transcript=tr,
            )
        )
    return results


def execute_shot(skill, incoming, env=None, rng=None, decide_tick=1, switches=None, obs_noise=True, reps=1):
    """Play one incoming ball with ``skill``: positioning, stroke plan, then contact.

    Returns a ShotResult, or a list when ``reps`` > 1 (the stroke plan is shared;
    execution noise is drawn per repetition).
    """
    env = env or SkillEnv()
    rng = rng if rng is not None else np.random.default_rng(0)
    ctx = prepare_shot(skill, incoming, env, rng, decide_tick, switches, obs_noise)
    if ctx is None:
        sid = (switches[max(switches)] if switches else skill).spec.id
        res = [ShotResult(NO_PLAY, sid) for _ in range(reps)]
    else:
        res = finish_shot(ctx, ctx.skill.plan_contact(ctx.estimate, env), env, rng, reps)
    return res if reps > 1 else res[0]


class ParametricSkill:
    """A scripted stroke skill defined entirely by its SkillSpec."""

    def __init__(self, spec):
        self.spec = spec

    def plan_contact(self, ball_at_plane, env):
        return plan_contact(self.spec, ball_at_plane, env)

    def __repr__(self):
        return f"ParametricSkill({self.spec.name})"


def build_skills(roster=None):
    return [ParametricSkill(s) for s in (roster or default_roster())]


# ------------------------------------------------------------------ rewards


def net_height_reward(z):
    z = float(z)
    if 0.173 <= z < 0.3:
        return math.exp(-10.0 * abs(z - 0.173))
    return -1.1


@dataclass(frozen=True)
class RewardConfig:
    transition: float = 1.0
    hit_and_land: float = 0.1
    jerk: float = 0.3
    acceleration: float = 0.3
    velocity: float = 0.4
    pose_safety: float = 1.0
    collision: float = 1.0
    paddle_height: float = 0.5
    style_pose: float = 1.0
    use_nhr: bool = False
    use_contact_angle: bool = False
    nhr_weight: float = 1.0
    contact_angle_weight: float = 1.0
    jerk_limit: float = 2000.0
    accel_limit: float = 40.0
    velocity_limit: float = 3.0
    workspace: tuple = ((-1.4, 1.4), (-2.4, -1.2), (-0.05, 1.0))
    reference_pose: tuple = ((0.35, -1.75, 0.25), (-0.35, -1.75, 0.25))


REWARD_CHANNELS = ("style", "positions", "commands", "collision_steps", "low_steps", "contact", "landed")


def reward_terms(transcript, cfg=RewardConfig()):
    missing = [c for c in REWARD_CHANNELS if c not in transcript]
    if missing:
        raise PreconditionError(f"transcript lacks channels: {missing}")
    pos = np.asarray(transcript["positions"], dtype=float)
    cmd = np.asarray(transcript["commands"], dtype=float)
    contact = bool(transcript["contact"])
    landed = bool(transcript["landed"]) and contact
    terms = {}
    terms["transition"] = (1.0 if contact else 0.0) + (1.0 if landed else 0.0)
    terms["hit_and_land"] = 1.0 if landed else 0.0
    speed = np.linalg.norm(cmd, axis=1) if len(cmd) else np.zeros(1)
    acc = np.linalg.norm(np.diff(cmd, axis=0), axis=1) / TICK if len(cmd) > 1 else np.zeros(1)
    jerk = np.linalg.norm(np.diff(cmd, n=2, axis=0), axis=1) / TICK**2 if len(cmd) > 2 else np.zeros(1)
    terms["jerk"] = 1.0 - float(np.mean(jerk > cfg.jerk_limit))
    terms["acceleration"] = 1.0 - float(np.mean(acc > cfg.accel_limit))
    terms["velocity"] = 1.0 - float(np.mean(speed > cfg.velocity_limit + 1e-9))
    (x0, x1), (y0, y1), (z0, z1) = cfg.workspace
    inside = (pos[:, 0] >= x0) & (pos[:, 0] <= x1) & (pos[:, 1] >= y0) & (pos[:, 1] <= y1) & (pos[:, 2] >= z0) & (pos[:, 2] <= z1)
    terms["pose_safety"] = float(np.mean(inside))
    terms["collision"] = -float(transcript["collision_steps"])
    terms["paddle_height"] = -float(transcript["low_steps"])
    ref = np.array(cfg.reference_pose[0] if transcript["style"] == FOREHAND else cfg.reference_pose[1])
    dmin = float(np.min(np.linalg.norm(pos - ref, axis=1)))
    cap = 1.0 if transcript["style"] == FOREHAND else 2.0
    terms["style_pose"] = max(cap - dmin, 0.0)
    if cfg.use_nhr:
        z = transcript.get("net_height")
        terms["nhr"] = net_height_reward(z) if z is not None else -1.1
    if cfg.use_contact_angle:
        d = transcript.get("contact_angle_error")
        terms["contact_angle"] = max(1.0 - float(d), 0.0) if d is not None and contact else 0.0
    return terms


_WEIGHT_FOR = {
    "transition": "transition",
    "hit_and_land": "hit_and_land",
    "jerk": "jerk",
    "acceleration": "acceleration",
    "velocity": "velocity",
    "pose_safety": "pose_safety",
    "collision": "collision",
    "paddle_height": "paddle_height",
    "style_pose": "style_pose",
    "nhr": "nhr_weight",
    "contact_angle": "contact_angle_weight",
}


def compute_reward(transcript, cfg=RewardConfig()):
    terms = reward_terms(transcript, cfg)
    return float(sum(getattr(cfg, _WEIGHT_FOR[k]) * v for k, v in terms.items()))


def max_reward(style, cfg=RewardConfig()):
    cap = 1.0 if style == FOREHAND else 2.0
    return 2 * cfg.transition + cfg.hit_and_land + cfg.jerk + cfg.acceleration + cfg.velocity + cfg.pose_safety + cap * cfg.style_pose


# ------------------------------------------------------------------ FiLM


class FilmAdapter:
    """gamma(o) = 1 + Wg o + bg, beta(o) = Wb o + bb; zero parameters give the identity."""

    def __init__(self, action_dim, obs_dim):
        self.action_dim = int(action_dim)
        self.obs_dim = int(obs_dim)
        self.params = np.zeros(self.size)

    @property
    def size(self):
        return 2 * self.action_dim * (self.obs_dim + 1)

    def _split(self):
        a, o = self.action_dim, self.obs_dim
        half = a * (o + 1)
        g = self.params[:half].reshape(a, o + 1)
        b = self.params[half:].reshape(a, o + 1)
        return g, b

    def gamma_beta(self, obs):
        o = np.asarray(obs, dtype=float).reshape(-1)
        if o.size != self.obs_dim:
            raise PreconditionError(f"adapter expects {self.obs_dim}-dim features, got {o.size}")
        g, b = self._split()
        x = np.append(o, 1.0)
        return 1.0 + g @ x, b @ x

    @classmethod
    def constant(cls, gamma, beta):
        gamma = np.asarray(gamma, dtype=float)
        ad = cls(gamma.size, 0)
        g, b = ad._split()
        g[:, 0] = gamma - 1.0
        b[:, 0] = np.asarray(beta, dtype=float)
        ad.params = np.concatenate([g.reshape(-1), b.reshape(-1)])
        return ad


def apply_film(action, adapter, obs):
    a = np.asarray(action, dtype=float)
    if a.size != adapter.action_dim:
        raise PreconditionError(f"action has {a.size} dims, adapter expects {adapter.action_dim}")
    gamma, beta = adapter.gamma_beta(obs)
    return gamma * a + beta


# ------------------------------------------------------------------ policy skill

OBS_ROWS = 8
OBS_COLS = 16
ACTION_DIM = 6


def build_observation(ball_history, paddle_position, paddle_normal, style, t_since_hit):
    """(8, 16) stack: ball position, ball velocity, paddle position, paddle normal, time, bias, style one-hot."""
    hist = np.asarray(ball_history, dtype=float)[-OBS_ROWS:]
    if len(hist) < OBS_ROWS:
        hist = np.vstack([np.repeat(hist[:1], OBS_ROWS - len(hist), axis=0), hist])
    obs = np.zeros((OBS_ROWS, OBS_COLS))
    obs[:, 0:6] = hist[:, 0:6]
    obs[:, 6:9] = paddle_position
    obs[:, 9:12] = paddle_normal
    obs[:, 12] = t_since_hit - TICK * np.arange(OBS_ROWS - 1, -1, -1)
    obs[:, 13] = 1.0
    obs[:, 14] = 1.0 if style == FOREHAND else 0.0
    obs[:, 15] = 0.0 if style == FOREHAND else 1.0
    return obs


class PolicySkill:
    """Linear-tanh policy on the flattened (8, 16) observation.

    The action sets the stroke at contact: a[0:3] adjusts the paddle velocity around
    a neutral push, a[3:6] tilts the paddle normal. Positioning is scripted.
    """

    velocity_scale = 3.0
    tilt_scale = 0.6
    neutral_velocity = np.array([0.0, 2.0, 0.0])

    def __init__(self, spec, params=None, normalizer=None, film=None):
        self.spec = spec
        self.in_dim = OBS_ROWS * OBS_COLS
        self.params = np.zeros(self.size) if params is None else np.asarray(params, dtype=float).copy()
        self.normalizer = normalizer or RunningNormalizer(self.in_dim)
        self.film = film
        self.update_normalizer = False
        self.style = spec.style

    @property
    def size(self):
        return ACTION_DIM * (self.in_dim + 1)

    def action(self, obs):
        x = normalize(np.asarray(obs, dtype=float).reshape(-1), self.normalizer, update=self.update_normalizer)
        W = self.params[: ACTION_DIM * self.in_dim].reshape(ACTION_DIM, self.in_dim)
        b = self.params[ACTION_DIM * self.in_dim :]
        a = np.tanh(W @ x / math.sqrt(self.in_dim) + b)
        if self.film is not None:
            a = apply_film(a, self.film, x[-OBS_COLS:][: self.film.obs_dim])
        return a

    def observation_for(self, ball_at_plane, env):
        """Observation from a short spin-free history ending at the predicted contact state."""
        s = np.asarray(ball_at_plane, dtype=float)
        hist = [s[0:6] - np.concatenate([s[3:6] * TICK * k, np.zeros(3)]) for k in range(OBS_ROWS - 1, -1, -1)]
        home_p, home_n = env.home
        return build_observation(hist, home_p, home_n, self.style, 0.4)

    def plan_contact(self, ball_at_plane, env):
        a = self.action(self.observation_for(ball_at_plane, env))
        v_p = self.neutral_velocity + self.velocity_scale * a[0:3]
        n = np.array([0.0, 1.0, 0.0]) + self.tilt_scale * a[3:6]
        n = n / np.linalg.norm(n)
        if np.linalg.norm(v_p) > env.max_swing_speed:
            v_p = v_p * (env.max_swing_speed / np.linalg.norm(v_p))
        return ContactPlan(np.asarray(ball_at_plane[0:3], dtype=float), n, v_p, True)

    def copy(self):
        film = None
        if self.film is not None:
            film = FilmAdapter(self.film.action_dim, self.film.obs_dim)
            film.params = self.film.params.copy()
        return PolicySkill(self.spec, self.params, self.normalizer.copy(), film)

    def to_arrays(self):
        out = {"params": self.params, "norm_mean": self.normalizer.mean, "norm_m2": self.normalizer._m2,
               "norm_count": np.array([self.normalizer.count])}
        if self.film is not None:
            out["film"] = self.film.params
            out["film_dims"] = np.array([self.film.action_dim, self.film.obs_dim])
        return out


def save_policy(skill, path, meta=None):
    """Flat numeric arrays, one per line, each preceded by a 'name size' header."""
    with open(path, "w") as fh:
        fh.write(f"# ttagent-policy skill={skill.spec.id} style={skill.spec.style}")
        for k, v in sorted((meta or {}).items()):
            fh.write(f" {k}={v}")
        fh.write("\n")
        for name, arr in skill.to_arrays().items():
            a = np.asarray(arr, dtype=float).reshape(-1)
            fh.write(f"{name} {a.size}\n")
            fh.write(" ".join(repr(float(x)) for x in a) + "\n")


def load_policy(path, spec):
    arrays = {}
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if not ln.startswith("#")]
    for i in range(0, len(lines), 2):
        name, size = lines[i].split()
        vals = np.array([float(x) for x in lines[i + 1].split()]) if int(size) else np.zeros(0)
        arrays[name] = vals
    norm = RunningNormalizer(OBS_ROWS * OBS_COLS)
    norm.mean = arrays["norm_mean"]
    norm._m2 = arrays["norm_m2"]
    norm.count = int(arrays["norm_count"][0])
    film = None
    if "film" in arrays:
        a, o = (int(x) for x in arrays["film_dims"])
        film = FilmAdapter(a, o)
        film.params = arrays["film"]
    return PolicySkill(spec, arrays["params"], norm, film)


def policy_spec(style=FOREHAND, sid=100):
    return SkillSpec(sid, f"{style[:2]}_policy", style, GENERALIST, False, (0.0, 0.8), 4.5, (0.05, 0.01), UNDERSPIN, -1.6)


class ContextPool:
    """Prepared shots for a fixed ball list, computed once per spec and reused across parameter trials."""

    def __init__(self, balls, env):
        self.balls = list(balls)
        self.env = env
        self._ctx = {}

    def __len__(self):
        return len(self.balls)

    def get(self, skill, i):
        # positioning depends only on style and hitting plane, so skills sharing them share contexts
        key = (skill.spec.hit_plane_y, skill.spec.style, i)
        if key not in self._ctx:
            self._ctx[key] = prepare_shot(skill, self.balls[i], self.env, np.random.default_rng(i), obs_noise=False)
        ctx = self._ctx[key]
        if ctx is None or ctx.skill is skill:
            return ctx
        return replace(ctx, spec=skill.spec, skill=skill)


def _as_pool(balls, env):
    return balls if isinstance(balls, ContextPool) else ContextPool(balls, env)


def _play(skill, pool, indices, env, seed=0):
    rng = np.random.default_rng(seed)
    for i in indices:
        ctx = pool.get(skill, i)
        if ctx is None:
            continue
        yield finish_shot(ctx, skill.plan_contact(ctx.estimate, env), env, rng)[0]


def evaluate_skill(skill, balls, env, rng=None, reward=None, seed=0):
    """(land rate, mean reward) over a fixed list of incoming balls or a ContextPool."""
    pool = _as_pool(balls, env)
    cfg = reward or RewardConfig()
    lands = n = 0
    total = 0.0
    for r in _play(skill, pool, range(len(pool)), env, seed):
        n += 1
        lands += r.landed
        total += compute_reward(r.transcript, cfg)
    return (lands / n if n else 0.0), (total / n if n else 0.0)


def _shaped_fitness(skill, pool, indices, env, reward, seed=0):
    """Reward plus a dense landing-distance term so ES sees signal before the first landing."""
    tx, ty = skill.spec.target_landing
    f = 0.0
    n = 0
    for r in _play(skill, pool, indices, env, seed):
        n += 1
        f += compute_reward(r.transcript, reward)
        if r.landing is not None:
            f -= 0.5 * min(math.hypot(r.landing[0] - tx, r.landing[1] - ty), 3.0)
        else:
            f -= 1.5
    return f / max(n, 1)


def _prime_normalizer(skill, pool, env):
    for i in range(len(pool)):
        ctx = pool.get(skill, i)
        if ctx is not None:
            skill.normalizer.update(skill.observation_for(ctx.estimate, env).reshape(-1))


def _training_pool(balls, spec, env, predicate=None):
    if isinstance(balls, ContextPool):
        return balls
    if hasattr(balls, "rally"):
        recs = [r for r in balls.rally() if predicate is None or predicate(r)]
        side = [r.initial for r in recs if r.style_side in (spec.style, "center")]
        balls = side or [r.initial for r in recs]
    return ContextPool(balls, env)


def train_policy_skill(balls, cfg, reward=None, rng=None, iterations=10, env=None, spec=None,
                       batch=8, curve=None, init=None):
    """ES training of a PolicySkill on incoming balls (a list, Dataset or ContextPool).

    Base training plays every ball with the underspin paddle parameters unless
    ``env`` says otherwise. Divergence raises with the last good parameters attached.
    """
    env = env or SkillEnv(contact=replace(DEFAULT_CONTACT, spin_dependent_paddle=False))
    rng = rng if rng is not None else np.random.default_rng(0)
    reward = reward or RewardConfig()
    spec = spec or (init.spec if init is not None else policy_spec())
    pool = _training_pool(balls, spec, env)
    if len(pool) == 0:
        raise PreconditionError("no training balls for this style")
    skill = init.copy() if init is not None else PolicySkill(spec)
    if init is None and cfg.normalize_obs and iterations > 0:
        _prime_normalizer(skill, pool, env)
    theta = skill.params.copy()
    for it in range(iterations):
        idx = rng.choice(len(pool), size=min(batch, len(pool)), replace=False)
        seed = int(rng.integers(2**31))

        def fitness(p, _idx=idx, _seed=seed):
            cand = skill.copy()
            cand.params = p
            return _shaped_fitness(cand, pool, _idx, env, reward, _seed)

        try:
            theta, info = es_step_info(theta, fitness, cfg, rng)
        except DivergenceError as exc:
            raise DivergenceError(f"policy training diverged at iteration {it}", checkpoint=skill.params.copy()) from exc
        skill.params = theta
        if curve is not None:
            curve.append((it, info.mean_fitness, info.best_fitness))
    return skill


def topspin_correct(skill, balls, cfg=None, adapter_cfg=None, env=None, rng=None, stage1_iterations=5,
                    adapter_iterations=20, underspin_balls=None, max_underspin_drop=0.05, batch=8):
    """Two-stage correction on topspin balls with spin-dependent paddle contact.

    Stage 1 fine-tunes the policy with net-height and contact-angle rewards. Stage 2
    freezes it and trains an identity-initialized FiLM adapter. A candidate is kept
    only if it does not lower the topspin land rate and does not cost more than
    ``max_underspin_drop`` on ``underspin_balls``.
    """
    env = env or SkillEnv()
    env = replace(env, contact=replace(env.contact, spin_dependent_paddle=True))
    rng = rng if rng is not None else np.random.default_rng(0)
    pool = _training_pool(balls, skill.spec, env, predicate=lambda r: r.initial.spin[0] > 50)
    if len(pool) == 0:
        raise PreconditionError("no topspin balls for correction")
    cfg = cfg or EsConfig(step_size=0.02, perturbation_std=0.05, num_perturbations=8,
                          rollouts_per_perturbation=1, keep_fraction=0.5)
    adapter_cfg = adapter_cfg or EsConfig(step_size=0.00125, num_perturbations=5, rollouts_per_perturbation=3,
                                          keep_fraction=0.6)
    reward = RewardConfig(use_nhr=True, use_contact_angle=True)
    under = _as_pool(underspin_balls, env) if underspin_balls is not None else None

    def score(sk):
        top = evaluate_skill(sk, pool, env)[0]
        und = evaluate_skill(sk, under, env)[0] if under is not None and len(under) else 0.0
        return top, und

    base_top, base_under = score(skill)
    best, best_top = skill.copy(), base_top

    def admissible(top, und):
        return top >= best_top and (under is None or und >= base_under - max_underspin_drop)

    stage1 = train_policy_skill(pool, cfg, reward, rng, stage1_iterations, env, skill.spec, batch, init=skill)
    t1, u1 = score(stage1)
    if admissible(t1, u1):
        best, best_top = stage1.copy(), t1
    adapted = best.copy()
    adapted.film = FilmAdapter(ACTION_DIM, OBS_COLS)
    for _ in range(adapter_iterations):
        idx = rng.choice(len(pool), size=min(batch, len(pool)), replace=False)
        seed = int(rng.integers(2**31))

        def fitness(p, _idx=idx, _seed=seed):
            cand = adapted.copy()
            cand.film.params = p
            return _shaped_fitness(cand, pool, _idx, env, reward, _seed)

        adapted.film.params, _ = es_step_info(adapted.film.params, fitness, adapter_cfg, rng)
        t2, u2 = score(adapted)
        if admissible(t2, u2) and t2 > best_top:
            best, best_top = adapted.copy(), t2
    return best
