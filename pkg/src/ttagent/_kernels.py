"""Compiled inner loops for ball flight, table bounce and paddle contact.

Everything here works on flat float64 arrays so numba can compile it. The
public, typed wrappers live in :mod:`ttagent.ballistics`.

Packed layouts
--------------
state (9):   px py pz vx vy vz wx wy wz
flight (14): rho viscosity blunt slender angular kutta magnus wx wy wz g radius mass dt
contact (8): table_e table_mu table_kappa paddle_e_top paddle_e_under paddle_mu paddle_kappa spin_dependent
geom (7):    half_length half_width net_height net_overhang ceiling bound_xy bound_z
"""

import math

import numpy as np
from numba import njit

EV_BOUNCE = 1
EV_NET_CROSS = 2
EV_NET_FAULT = 3
EV_OUT = 4
EV_HIGH = 5
EV_PADDLE = 6
EV_PADDLE_PASS = 7

END_HORIZON = 0
END_OUT = 1
END_NET = 2
END_BOUNCES = 3

MAX_EVENTS = 32
# hollow sphere: I = 2/3 m r^2
_ROLL_FRACTION = 1.0 / (1.0 + 1.5)
_INV_INERTIA_COEF = 1.5


@njit(cache=True)
def accel(vx, vy, vz, wx, wy, wz, fp):
    rho = fp[0]
    blunt = fp[2]
    magnus = fp[6]
    g = fp[10]
    r = fp[11]
    m = fp[12]
    rx = vx - fp[7]
    ry = vy - fp[8]
    rz = vz - fp[9]
    speed = math.sqrt(rx * rx + ry * ry + rz * rz)
    kd = 0.5 * rho * blunt * math.pi * r * r / m
    km = magnus * rho * (4.0 / 3.0) * math.pi * r * r * r / m
    ax = -kd * speed * rx + km * (wy * rz - wz * ry)
    ay = -kd * speed * ry + km * (wz * rx - wx * rz)
    az = -kd * speed * rz + km * (wx * ry - wy * rx) - g
    return ax, ay, az


@njit(cache=True)
def spin_decay(wx, wy, wz, fp, dt):
    """Factor applied to spin over dt; 1.0 when the angular drag coefficient is zero."""
    c = fp[4]
    if c == 0.0:
        return 1.0
    rho = fp[0]
    r = fp[11]
    m = fp[12]
    w = math.sqrt(wx * wx + wy * wy + wz * wz)
    inertia = (2.0 / 3.0) * m * r * r
    k = c * rho * math.pi * r ** 5 / inertia
    f = 1.0 - k * w * dt
    if f < 0.0:
        return 0.0
    return f


@njit(cache=True)
def flight_step(s, fp, dt):
    """One constant-acceleration step (exact for gravity, first order in aero terms)."""
    out = np.empty(9)
    ax, ay, az = accel(s[3], s[4], s[5], s[6], s[7], s[8], fp)
    h = 0.5 * dt * dt
    out[0] = s[0] + s[3] * dt + ax * h
    out[1] = s[1] + s[4] * dt + ay * h
    out[2] = s[2] + s[5] * dt + az * h
    out[3] = s[3] + ax * dt
    out[4] = s[4] + ay * dt
    out[5] = s[5] + az * dt
    f = spin_decay(s[6], s[7], s[8], fp, dt)
    out[6] = s[6] * f
    out[7] = s[7] * f
    out[8] = s[8] * f
    return out


@njit(cache=True)
def _advance(s, ax, ay, az, tau, fp):
    out = np.empty(9)
    h = 0.5 * tau * tau
    out[0] = s[0] + s[3] * tau + ax * h
    out[1] = s[1] + s[4] * tau + ay * h
    out[2] = s[2] + s[5] * tau + az * h
    out[3] = s[3] + ax * tau
    out[4] = s[4] + ay * tau
    out[5] = s[5] + az * tau
    f = spin_decay(s[6], s[7], s[8], fp, tau)
    out[6] = s[6] * f
    out[7] = s[7] * f
    out[8] = s[8] * f
    return out


@njit(cache=True)
def _first_root(p0, v0, a0, target, tmax):
    """Smallest tau in (0, tmax] with p0 + v0*tau + a0*tau^2/2 == target, or -1."""
    c = p0 - target
    b = v0
    a = 0.5 * a0
    best = -1.0
    if abs(a) < 1e-14:
        if b != 0.0:
            t = -c / b
            if t > 0.0 and t <= tmax:
                best = t
        return best
    disc = b * b - 4.0 * a * c
    if disc < 0.0:
        return -1.0
    sq = math.sqrt(disc)
    # numerically stable pair
    if b >= 0.0:
        q = -0.5 * (b + sq)
    else:
        q = -0.5 * (b - sq)
    t1 = q / a
    t2 = c / q if q != 0.0 else -1.0
    for t in (t1, t2):
        if t > 0.0 and t <= tmax:
            if best < 0.0 or t < best:
                best = t
    return best


@njit(cache=True)
def impulse_contact(vrx, vry, vrz, wx, wy, wz, nx, ny, nz, e, mu, kappa, r):
    """Impulse response of a hollow sphere hitting a surface with outward normal n.

    Inputs are the ball velocity relative to the surface point and the ball spin.
    Returns the new relative velocity and new spin.
    """
    vn = vrx * nx + vry * ny + vrz * nz
    # contact point offset from centre
    cx = -r * nx
    cy = -r * ny
    cz = -r * nz
    ux = vrx + (wy * cz - wz * cy)
    uy = vry + (wz * cx - wx * cz)
    uz = vrz + (wx * cy - wy * cx)
    un = ux * nx + uy * ny + uz * nz
    utx = ux - un * nx
    uty = uy - un * ny
    utz = uz - un * nz
    dvn = -(1.0 + e) * vn
    ox = vrx + dvn * nx
    oy = vry + dvn * ny
    oz = vrz + dvn * nz
    ut = math.sqrt(utx * utx + uty * uty + utz * utz)
    owx = wx
    owy = wy
    owz = wz
    if ut > 0.0 and mu > 0.0:
        frac = _ROLL_FRACTION
        lim = mu * dvn / ut
        if lim < frac:
            frac = lim
        dx = -utx * frac
        dy = -uty * frac
        dz = -utz * frac
        ox += dx
        oy += dy
        oz += dz
        k = kappa * _INV_INERTIA_COEF / (r * r)
        owx += k * (cy * dz - cz * dy)
        owy += k * (cz * dx - cx * dz)
        owz += k * (cx * dy - cy * dx)
    return ox, oy, oz, owx, owy, owz


@njit(cache=True)
def bounce_table(s, cp, r):
    out = s.copy()
    vx, vy, vz, wx, wy, wz = impulse_contact(
        s[3], s[4], s[5], s[6], s[7], s[8], 0.0, 0.0, 1.0, cp[0], cp[1], cp[2], r
    )
    out[3] = vx
    out[4] = vy
    out[5] = vz
    out[6] = wx
    out[7] = wy
    out[8] = wz
    return out


@njit(cache=True)
def is_underspin(s):
    """Backspin relative to travel: Magnus lift points up."""
    return (s[6] * s[4] - s[7] * s[3]) > 0.0


@njit(cache=True)
def paddle_contact(s, pp, pn, pv, pw, cp, r, underspin):
    """Returns (new_state, ok). ok is False when the ball is moving away from the paddle."""
    # face normal on the ball's side
    dx = s[0] - pp[0]
    dy = s[1] - pp[1]
    dz = s[2] - pp[2]
    d = dx * pn[0] + dy * pn[1] + dz * pn[2]
    # velocity of the paddle surface at the point nearest the ball
    ox = dx - d * pn[0]
    oy = dy - d * pn[1]
    oz = dz - d * pn[2]
    sx = pv[0] + (pw[1] * oz - pw[2] * oy)
    sy = pv[1] + (pw[2] * ox - pw[0] * oz)
    sz = pv[2] + (pw[0] * oy - pw[1] * ox)
    vrx = s[3] - sx
    vry = s[4] - sy
    vrz = s[5] - sz
    vn = vrx * pn[0] + vry * pn[1] + vrz * pn[2]
    sgn = 1.0
    if d < 0.0:
        sgn = -1.0
    elif d == 0.0:
        sgn = -1.0 if vn > 0.0 else 1.0
    nx = sgn * pn[0]
    ny = sgn * pn[1]
    nz = sgn * pn[2]
    out = s.copy()
    if sgn * vn >= 0.0:
        return out, False
    e = cp[4]
    if cp[7] > 0.5 and not underspin:
        e = cp[3]
    a, b, c, wx, wy, wz = impulse_contact(
        vrx, vry, vrz, s[6], s[7], s[8], nx, ny, nz, e, cp[5], cp[6], r
    )
    out[3] = a + sx
    out[4] = b + sy
    out[5] = c + sz
    out[6] = wx
    out[7] = wy
    out[8] = wz
    return out, True


@njit(cache=True)
def rollout(
    s0,
    fp,
    cp,
    geom,
    n_steps,
    stop_bounces,
    paddle_on,
    pp0,
    pn,
    pv,
    pw,
    paddle_radius,
    record,
):
    """Integrate up to n_steps of dt, handling table, net, floor and (optionally) a paddle.

    The paddle, when enabled, translates with constant velocity pv from pp0 and
    keeps normal pn. At most one paddle contact is resolved per call.

    Returns (states, n_rec, events, n_ev, steps_done, end_code, final_state).
    ``states`` row k holds the state after k whole steps when ``record`` is set.
    """
    dt = fp[13]
    r = fp[11]
    hl = geom[0]
    hw = geom[1]
    net_h = geom[2]
    net_w = geom[1] + geom[3]
    ceiling = geom[4]
    bound_xy = geom[5]
    n_rec_max = n_steps + 1 if record else 1
    states = np.empty((n_rec_max, 9))
    events = np.zeros((MAX_EVENTS, 6))
    n_ev = 0
    s = s0.copy()
    states[0, :] = s
    n_rec = 1
    bounces = 0
    high_seen = s[2] > ceiling
    paddle_done = not paddle_on
    end_code = END_HORIZON
    steps = 0
    pp = pp0.copy()
    for k in range(n_steps):
        remaining = dt
        t0 = k * dt
        stop = False
        for _sub in range(6):
            if remaining <= 0.0:
                break
            ax, ay, az = accel(s[3], s[4], s[5], s[6], s[7], s[8], fp)
            tn = _advance(s, ax, ay, az, remaining, fp)
            # earliest event in this sub-step
            ev_kind = 0
            ev_tau = remaining + 1.0
            if s[2] - r >= 0.0 and tn[2] - r < 0.0:
                tau = _first_root(s[2], s[5], az, r, remaining)
                if tau > 0.0:
                    bx = s[0] + s[3] * tau + 0.5 * ax * tau * tau
                    by = s[1] + s[4] * tau + 0.5 * ay * tau * tau
                    if abs(bx) <= hw and abs(by) <= hl:
                        ev_kind = EV_BOUNCE
                        ev_tau = tau
            if (s[1] > 0.0 and tn[1] <= 0.0) or (s[1] < 0.0 and tn[1] >= 0.0):
                tau = _first_root(s[1], s[4], ay, 0.0, remaining)
                if tau > 0.0 and tau < ev_tau:
                    ev_kind = EV_NET_CROSS
                    ev_tau = tau
            if not paddle_done:
                d0 = (s[0] - pp[0]) * pn[0] + (s[1] - pp[1]) * pn[1] + (s[2] - pp[2]) * pn[2]
                q0 = pp[0] + pv[0] * remaining
                q1 = pp[1] + pv[1] * remaining
                q2 = pp[2] + pv[2] * remaining
                d1 = (tn[0] - q0) * pn[0] + (tn[1] - q1) * pn[1] + (tn[2] - q2) * pn[2]
                sg = 1.0 if d0 >= 0.0 else -1.0
                a0 = sg * d0
                a1 = sg * d1
                if a0 > r and a1 <= r:
                    tau = remaining * (a0 - r) / (a0 - a1)
                    if tau <= 0.0:
                        tau = 1e-12
                    if tau < ev_tau:
                        ev_kind = EV_PADDLE
                        ev_tau = tau
                elif a0 <= r and a1 < -r:
                    # started inside the slab and tunnelled through
                    tau = 1e-12
                    if tau < ev_tau:
                        ev_kind = EV_PADDLE
                        ev_tau = tau
            if ev_kind == 0:
                s = tn
                pp[0] += pv[0] * remaining
                pp[1] += pv[1] * remaining
                pp[2] += pv[2] * remaining
                remaining = 0.0
                break
            s = _advance(s, ax, ay, az, ev_tau, fp)
            pp[0] += pv[0] * ev_tau
            pp[1] += pv[1] * ev_tau
            pp[2] += pv[2] * ev_tau
            remaining -= ev_tau
            tev = t0 + (dt - remaining)
            if ev_kind == EV_BOUNCE:
                s[2] = r
                if s[5] < 0.0:
                    s = bounce_table(s, cp, r)
                if n_ev < MAX_EVENTS:
                    events[n_ev, 0] = EV_BOUNCE
                    events[n_ev, 1] = k
                    events[n_ev, 2] = tev
                    events[n_ev, 3] = s[0]
                    events[n_ev, 4] = s[1]
                    events[n_ev, 5] = s[2]
                    n_ev += 1
                bounces += 1
                if stop_bounces > 0 and bounces >= stop_bounces:
                    end_code = END_BOUNCES
                    stop = True
                    break
            elif ev_kind == EV_NET_CROSS:
                s[1] = 0.0
                fault = abs(s[0]) <= net_w and s[2] - r < net_h and s[2] + r > 0.0
                if n_ev < MAX_EVENTS:
                    events[n_ev, 0] = EV_NET_FAULT if fault else EV_NET_CROSS
                    events[n_ev, 1] = k
                    events[n_ev, 2] = tev
                    events[n_ev, 3] = s[0]
                    events[n_ev, 4] = s[1]
                    events[n_ev, 5] = s[2]
                    n_ev += 1
                if fault:
                    end_code = END_NET
                    stop = True
                    break
                # nudge past the plane so the crossing is not re-detected
                s[1] = 1e-12 if s[4] > 0.0 else -1e-12
            else:
                paddle_done = True
                dx = s[0] - pp[0]
                dy = s[1] - pp[1]
                dz = s[2] - pp[2]
                dn = dx * pn[0] + dy * pn[1] + dz * pn[2]
                ix = dx - dn * pn[0]
                iy = dy - dn * pn[1]
                iz = dz - dn * pn[2]
                inplane = math.sqrt(ix * ix + iy * iy + iz * iz)
                hit = False
                if inplane <= paddle_radius:
                    ns, ok = paddle_contact(s, pp, pn, pv, pw, cp, r, is_underspin(s))
                    if ok:
                        s = ns
                        hit = True
                if n_ev < MAX_EVENTS:
                    events[n_ev, 0] = EV_PADDLE if hit else EV_PADDLE_PASS
                    events[n_ev, 1] = k
                    events[n_ev, 2] = tev
                    events[n_ev, 3] = s[0]
                    events[n_ev, 4] = s[1]
                    events[n_ev, 5] = s[2]
                    n_ev += 1
        steps = k + 1
        if record:
            states[n_rec, :] = s
            n_rec += 1
        if stop:
            break
        if not high_seen and s[2] > ceiling:
            high_seen = True
            if n_ev < MAX_EVENTS:
                events[n_ev, 0] = EV_HIGH
                events[n_ev, 1] = k
                events[n_ev, 2] = (k + 1) * dt
                events[n_ev, 3] = s[0]
                events[n_ev, 4] = s[1]
                events[n_ev, 5] = s[2]
                n_ev += 1
        if s[2] < 0.0 or abs(s[0]) > bound_xy or abs(s[1]) > bound_xy or s[2] > geom[6]:
            if n_ev < MAX_EVENTS:
                events[n_ev, 0] = EV_OUT
                events[n_ev, 1] = k
                events[n_ev, 2] = (k + 1) * dt
                events[n_ev, 3] = s[0]
                events[n_ev, 4] = s[1]
                events[n_ev, 5] = s[2]
                n_ev += 1
            end_code = END_OUT
            break
    return states[:n_rec], n_rec, events[:n_ev], n_ev, steps, end_code, s
