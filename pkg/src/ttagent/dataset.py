"""Task distribution of initial ball states: ingestion, fitting, reflection and weighted sampling."""

from __future__ import annotations

import json
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import least_squares

from . import _kernels as K
from .ballistics import (
    BACKHAND,
    CENTER,
    DEFAULT_CONTACT,
    DEFAULT_FLIGHT,
    DEFAULT_TABLE,
    FOREHAND,
    BallCategory,
    BallState,
    aim,
    annotate_style_side,
    classify_category,
    first_bounce,
    mirror_state,
)
from .errors import (
    FitFailedError,
    NotClassifiableError,
    PreconditionError,
    SamplingExhaustedError,
    UnknownRecordError,
)
from .optimizer import EsConfig, es_step

RETURN = "return"
HIT = "hit"
MISS = "miss"
UNKNOWN = "unknown"
OUTCOMES = (RETURN, HIT, MISS, UNKNOWN)

OBS_RATE_HZ = 125.0

_SWAP_SIDE = {FOREHAND: BACKHAND, BACKHAND: FOREHAND, CENTER: CENTER}


@dataclass
class BallStateRecord:
    id: int
    initial: BallState
    is_serve: bool = False
    outcome: str = UNKNOWN
    categories: BallCategory = BallCategory.NONE
    style_side: str = CENTER
    cycle: int = 0
    reflected: bool = False
    weight: float = 1.0

    def to_json(self):
        return {
            "id": self.id,
            "initial": self.initial.to_array().tolist(),
            "is_serve": self.is_serve,
            "outcome": self.outcome,
            "categories": self.categories.names(),
            "style_side": self.style_side,
            "cycle": self.cycle,
            "reflected": self.reflected,
            "weight": self.weight,
        }

    @classmethod
    def from_json(cls, d):
        return cls(
            id=int(d["id"]),
            initial=BallState.from_array(d["initial"]),
            is_serve=bool(d["is_serve"]),
            outcome=d["outcome"],
            categories=BallCategory.from_names(d["categories"]),
            style_side=d["style_side"],
            cycle=int(d["cycle"]),
            reflected=bool(d["reflected"]),
            weight=float(d.get("weight", 1.0)),
        )


def _style_or_center(state, flight, contact, table):
    try:
        return annotate_style_side(state, flight, contact, table)
    except NotClassifiableError:
        return CENTER


def make_record(rid, state, is_serve=False, cycle=0, flight=DEFAULT_FLIGHT, contact=DEFAULT_CONTACT, table=DEFAULT_TABLE):
    return BallStateRecord(
        id=rid,
        initial=state,
        is_serve=is_serve,
        categories=classify_category(state),
        style_side=_style_or_center(state, flight, contact, table),
        cycle=cycle,
    )


class Dataset:
    """Ordered records plus per-category return-rate accumulators [returns, attempts]."""

    def __init__(self, records=()):
        self.records = []
        self._index = {}
        self.accumulators = {c: [0, 0] for c in BallCategory.singles()}
        for r in records:
            self.add(r)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, rid):
        try:
            return self.records[self._index[rid]]
        except KeyError:
            raise UnknownRecordError(f"no record with id {rid}") from None

    def next_id(self):
        return (max(self._index) + 1) if self._index else 0

    def add(self, record):
        if record.id in self._index:
            raise PreconditionError(f"duplicate record id {record.id}")
        self._index[record.id] = len(self.records)
        self.records.append(record)
        self._count(record, +1)

    def add_state(self, state, is_serve=False, cycle=0, **kw):
        rec = make_record(self.next_id(), state, is_serve, cycle, **kw)
        self.add(rec)
        return rec

    def _count(self, record, sign):
        if record.outcome == UNKNOWN:
            return
        for c in BallCategory.singles():
            if c in record.categories:
                acc = self.accumulators[c]
                acc[1] += sign
                if record.outcome == RETURN:
                    acc[0] += sign

    def recount(self):
        fresh = {c: [0, 0] for c in BallCategory.singles()}
        for r in self.records:
            if r.outcome == UNKNOWN:
                continue
            for c in BallCategory.singles():
                if c in r.categories:
                    fresh[c][1] += 1
                    fresh[c][0] += r.outcome == RETURN
        return fresh

    def return_rate(self, category):
        ret, tot = self.accumulators[category]
        return ret / tot if tot else 0.0

    def rally(self):
        return [r for r in self.records if not r.is_serve]

    def serves(self):
        return [r for r in self.records if r.is_serve]

    def copy(self):
        return Dataset(replace(r) for r in self.records)


def record_outcome(dataset, record_id, outcome, overweight=None):
    """Set an outcome and update accumulators; ``overweight`` scales within-category weight for hit/miss."""
    if outcome not in OUTCOMES:
        raise PreconditionError(f"unknown outcome {outcome!r}")
    rec = dataset[record_id]
    dataset._count(rec, -1)
    rec.outcome = outcome
    dataset._count(rec, +1)
    if overweight is not None and outcome in (HIT, MISS):
        if overweight <= 0:
            raise PreconditionError("overweight factor must be positive")
        rec.weight = float(overweight)
    return dataset


def reflect_y(dataset, flight=DEFAULT_FLIGHT, contact=DEFAULT_CONTACT, table=DEFAULT_TABLE):
    """Append a laterally mirrored copy of every rally record."""
    out = dataset.copy()
    nid = out.next_id()
    for r in dataset.records:
        if r.is_serve:
            continue
        m = mirror_state(r.initial)
        out.add(
            BallStateRecord(
                id=nid,
                initial=m,
                is_serve=False,
                outcome=UNKNOWN,
                categories=classify_category(m),
                style_side=_SWAP_SIDE[r.style_side],
                cycle=r.cycle,
                reflected=not r.reflected,
            )
        )
        nid += 1
    return out


def reflect_rally(dataset, **kw):
    """Mirror only rally records; serves are kept once. Size doubles for rally-only corpora."""
    return reflect_y(dataset, **kw)


def is_valid_incoming(state, flight=DEFAULT_FLIGHT, contact=DEFAULT_CONTACT, table=DEFAULT_TABLE):
    """Crosses the net toward the robot and first bounces inside the robot's half."""
    land, net_z, _ = first_bounce(state.to_array(), flight, contact, table)
    if land is None or net_z is None or state.velocity[1] >= 0:
        return False
    return bool(land[1] < 0 and abs(land[0]) <= table.half_width and land[1] >= -table.half_length)


def category_weights(dataset, categories, epsilon=0.05):
    rates = np.array([dataset.return_rate(c) for c in categories])
    w = 1.0 / (rates + epsilon)
    return w / w.sum()


def sample_initial_state(
    dataset,
    rng,
    perturbation_scale=1.0,
    perturbation=None,
    epsilon=0.05,
    max_attempts=100,
    include_serves=False,
    flight=DEFAULT_FLIGHT,
    contact=DEFAULT_CONTACT,
    table=DEFAULT_TABLE,
    return_record=False,
):
    """Category ∝ 1/(return rate + ε), record uniform (times its weight) within it, then perturb."""
    pert = perturbation or {"position": 0.005, "velocity": 0.05, "spin": 2.0}
    pool = dataset.records if include_serves else dataset.rally()
    members = {c: [r for r in pool if c in r.categories] for c in BallCategory.singles()}
    cats = [c for c, m in members.items() if m]
    if not cats:
        raise PreconditionError("no records to sample from")
    probs = category_weights(dataset, cats, epsilon)
    scale = np.repeat([pert["position"], pert["velocity"], pert["spin"]], 3) * perturbation_scale
    for _ in range(max_attempts):
        c = cats[rng.choice(len(cats), p=probs)]
        m = members[c]
        w = np.array([r.weight for r in m])
        rec = m[rng.choice(len(m), p=w / w.sum())]
        if perturbation_scale == 0:
            state = rec.initial
        else:
            state = BallState.from_array(rec.initial.to_array() + scale * rng.standard_normal(9))
        if is_valid_incoming(state, flight, contact, table):
            return (state, rec) if return_record else state
    raise SamplingExhaustedError(f"{max_attempts} consecutive validation failures")


# ---------------------------------------------------------------- persistence

FIELD_ORDER = ("id", "initial", "is_serve", "outcome", "categories", "style_side", "cycle", "reflected", "weight")


def save_dataset(dataset, path, meta=None):
    with open(path, "w") as fh:
        fh.write(json.dumps({"format": "ttagent-dataset", "version": 1, "fields": list(FIELD_ORDER), **(meta or {})}) + "\n")
        for r in dataset.records:
            fh.write(json.dumps(r.to_json()) + "\n")


def load_dataset(path):
    with open(path) as fh:
        lines = [ln for ln in fh if ln.strip()]
    if not lines:
        raise PreconditionError(f"{path} is empty")
    head = json.loads(lines[0])
    if head.get("format") != "ttagent-dataset":
        raise PreconditionError(f"{path} is not a dataset file")
    return Dataset(BallStateRecord.from_json(json.loads(ln)) for ln in lines[1:])


STATS_COLUMNS = ("All", "Forehand", "Center", "Backhand", "Fast", "Normal", "Slow", "Topspin", "Nospin", "Underspin", "Lob")


def _count_row(records):
    row = Counter()
    row["All"] = len(records)
    for r in records:
        row[r.style_side.capitalize()] += 1
        for name in r.categories.names():
            row[name.capitalize()] += 1
    return [row[c] for c in STATS_COLUMNS]


def summary_table(dataset):
    """Rows (dataset type, dataset, counts...) per cycle plus totals."""
    rows = []
    for kind, recs in (("Rallying", dataset.rally()), ("Serves", dataset.serves())):
        if not recs:
            continue
        originals = [r for r in recs if not r.reflected]
        for cyc in sorted({r.cycle for r in originals}):
            name = "Initial" if cyc == 0 else f"Cycle {cyc}"
            rows.append([kind, name, *_count_row([r for r in originals if r.cycle == cyc])])
        rows.append([kind, "Final", *_count_row(originals)])
        if len(originals) != len(recs):
            rows.append([kind, "Final+reflection", *_count_row(recs)])
    return rows


# ------------------------------------------------------------ observed data


@dataclass
class ObservedTrajectory:
    t: np.ndarray
    positions: np.ndarray
    source: str = ""
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        if len(self.t) != len(self.positions):
            raise PreconditionError("times and positions differ in length")
        if len(self.t) > 1 and not np.all(np.diff(self.t) > 0):
            raise PreconditionError("observation times must be strictly increasing")

    def __len__(self):
        return len(self.t)

    def slice(self, a, b):
        return ObservedTrajectory(self.t[a:b], self.positions[a:b], self.source)


def segment_trajectories(stream, threshold=2.0, window=3, min_samples=8):
    """Split a stream at hits: y-velocity sign reversals larger than ``threshold`` over ``window`` samples.

    With hits, each segment starts just after a hit and the partial flight before
    the first hit is dropped. Without hits a moving stream is one segment.
    """
    n = len(stream)
    if n < min_samples:
        out = []
        warnings.warn("stream too short to segment", RuntimeWarning, stacklevel=2)
        return out
    y = stream.positions[:, 1]
    vy = np.diff(y) / np.diff(stream.t)
    hits = []
    i = 0
    while i + window < len(vy):
        a, b = vy[i], vy[i + window]
        if np.sign(a) != np.sign(b) and a != 0 and abs(b - a) > threshold:
            j = i + 1
            while j <= i + window and np.sign(vy[j]) == np.sign(a):
                j += 1
            # vy[j] is the first post-hit velocity, spanning samples j..j+1
            hits.append(j)
            i = j + window
        else:
            i += 1
    if not hits:
        span = np.ptp(stream.positions, axis=0).max()
        return [stream] if span > 1e-3 else []
    bounds = hits + [n]
    segs = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        if b - a >= 2:
            segs.append(stream.slice(a, b))
    return segs


def _sim_positions(x, times, flight, contact, table):
    """Positions of a ball started from packed state x at times[0], sampled at ``times``."""
    rel = times - times[0]
    n = int(math.ceil(rel[-1] / flight.dt)) + 1
    states, n_rec, _, _, _, _, final = K.rollout(
        np.asarray(x, dtype=float), flight.packed, contact.packed, table.packed, n, 0, False,
        np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(3), 0.0, True,
    )
    pos = states[:n_rec, :3]
    u = rel / flight.dt
    i = np.minimum(np.floor(u).astype(int), n_rec - 1)
    j = np.minimum(i + 1, n_rec - 1)
    w = (u - i)[:, None]
    return pos[i] * (1 - w) + pos[j] * w


def trajectory_residual(state, traj, flight=DEFAULT_FLIGHT, contact=DEFAULT_CONTACT, table=DEFAULT_TABLE):
    """RMSE (m) between simulated and observed positions."""
    x = state.to_array() if isinstance(state, BallState) else np.asarray(state, dtype=float)
    d = _sim_positions(x, traj.t, flight, contact, table) - traj.positions
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


_SCALE = np.array([0.01, 0.01, 0.01, 0.1, 0.1, 0.1, 20.0, 20.0, 20.0])
# spin beyond ~60 rev/s is outside human play; the bound keeps weakly observed axes from running off
_HI = np.array([np.inf] * 3 + [40.0] * 3 + [400.0] * 3) / _SCALE
_LO = -_HI


def fit_initial_state(
    traj,
    flight=DEFAULT_FLIGHT,
    contact=DEFAULT_CONTACT,
    table=DEFAULT_TABLE,
    rng=None,
    restarts=4,
    es_iterations=30,
    es_config=None,
    residual_ceiling=0.02,
    spin_prior_std=10.0,
):
    """Initial 9-dim state at traj.t[0] minimizing position RMSE. Returns (state, residual).

    ES multi-start (seeded by finite-difference velocity and a spread of spin guesses)
    followed by a least-squares polish of the best start.
    """
    if len(traj) < 10 or traj.t[-1] - traj.t[0] < 0.1 - 1e-12:
        raise PreconditionError("need at least 10 samples spanning 0.1 s")
    rng = rng if rng is not None else np.random.default_rng(0)
    P = traj.positions
    t = traj.t
    # ballistic fit (known gravity) over the samples before the first bounce
    zmin = int(np.argmin(P[:, 2]))
    m = max(min(zmin if zmin >= 5 else len(t), 25), min(len(t), 6))
    tau = t[:m] - t[0]
    A = np.column_stack([np.ones(m), tau])
    target = P[:m].copy()
    target[:, 2] += 0.5 * flight.gravity * tau**2
    coef, *_ = np.linalg.lstsq(A, target, rcond=None)
    p0, v0 = coef[0], coef[1]
    n_obs = len(t)

    def resid(z, prior=0.0):
        x = z * _SCALE
        d = (_sim_positions(x, t, flight, contact, table) - P).reshape(-1)
        if prior > 0:
            # spin about the flight axis barely bends the path; a weak MAP prior keeps it bounded
            vhat = x[3:6] / (np.linalg.norm(x[3:6]) + 1e-12)
            d = np.concatenate([d, [prior * float(x[6:] @ vhat) / spin_prior_std]])
        return d

    def fitness(z):
        r = resid(z)
        return -float(r @ r)

    def polish(z, prior=0.0):
        z = np.clip(z, _LO, _HI)
        sol = least_squares(lambda q: resid(q, prior), z, method="trf", bounds=(_LO, _HI), x_scale="jac",
                            xtol=1e-12, ftol=1e-12, gtol=1e-12, max_nfev=3000)
        return sol.x

    cfg = es_config or EsConfig(step_size=0.02, perturbation_std=0.05, num_perturbations=16,
                                rollouts_per_perturbation=1, keep_fraction=0.5)
    spins = [np.zeros(3), np.array([100.0, 0, 0]), np.array([-100.0, 0, 0]), np.array([0, 0, 60.0])]
    cands = []
    for r in range(max(1, restarts)):
        w = spins[r % len(spins)]
        z = np.concatenate([p0, v0, w]) / _SCALE
        for _ in range(es_iterations):
            z = es_step(z, fitness, cfg, rng)
        z = polish(z)
        cands.append((fitness(z), r, z))
    cands.sort(key=lambda c: (-c[0], c[1]))
    z = cands[0][2]
    # noise level from the unregularized fit sets the prior weight (zero for clean data)
    sigma_hat = math.sqrt(max(-cands[0][0], 0.0) / (3 * n_obs))
    if spin_prior_std and sigma_hat > 1e-4:
        z = polish(z, prior=sigma_hat * math.sqrt(3.0))
    state = BallState.from_array(z * _SCALE)
    res = trajectory_residual(state, traj, flight, contact, table)
    if not math.isfinite(res) or res > residual_ceiling:
        raise FitFailedError(f"fit residual {res:.4g} m exceeds ceiling {residual_ceiling}", best=state, residual=res)
    return state, res


def load_raw_trajectory(path, delimiter=None):
    """Read (t, x, y, z) rows; comma or whitespace delimited, '#' comments allowed."""
    rows = []
    with open(path) as fh:
        for ln in fh:
            ln = ln.split("#", 1)[0].strip()
            if not ln:
                continue
            parts = ln.replace(",", " ").split() if delimiter is None else ln.split(delimiter)
            if len(parts) != 4:
                raise PreconditionError(f"expected 4 columns (t, x, y, z), got {len(parts)}: {ln!r}")
            rows.append([float(p) for p in parts])
    if not rows:
        raise PreconditionError(f"{path} contains no samples")
    a = np.array(rows)
    return ObservedTrajectory(a[:, 0], a[:, 1:], source=str(path))


# ---------------------------------------------------------------- synthetic corpus


def synth_incoming(rng, kind="rally", flight=DEFAULT_FLIGHT, contact=DEFAULT_CONTACT, table=DEFAULT_TABLE, tries=20,
                   spin_x=None, speed=None):
    """A plausible opponent shot that crosses the net and bounces on the robot's half.

    ``spin_x`` and ``speed`` optionally fix (low, high) ranges for the sidespin-free
    spin component and the forward speed.
    """
    for _ in range(tries):
        if kind == "serve":
            sp = rng.uniform(2.5, 5.5)
            wx = rng.choice([rng.uniform(-140, -30), rng.uniform(-20, 40)], p=[0.35, 0.65])
            pos = [rng.uniform(-0.5, 0.5), rng.uniform(1.45, 1.7), rng.uniform(0.1, 0.3)]
        else:
            sp = rng.choice([rng.uniform(2.5, 4.5), rng.uniform(4.5, 9.5)], p=[0.2, 0.8])
            wx = rng.uniform(-90, 140)
            pos = [rng.uniform(-0.7, 0.7), rng.uniform(1.5, 2.0), rng.uniform(0.1, 0.5)]
        if spin_x is not None:
            wx = rng.uniform(*spin_x)
        if speed is not None:
            sp = rng.uniform(*speed)
        spin = np.array([wx, rng.normal(0, 8), rng.normal(0, 15)])
        target = [rng.uniform(-0.65, 0.65), rng.uniform(-1.25, -0.25)]
        v, err = aim(pos, spin, sp, target, flight, contact, table, direction=-1.0)
        if err < 0.02:
            s = BallState(pos, v, spin)
            if is_valid_incoming(s, flight, contact, table):
                return s
    raise SamplingExhaustedError("could not synthesize a valid incoming ball")


def synth_dataset(n_rally, n_serve=0, rng=None, cycles=1, **kw):
    rng = rng if rng is not None else np.random.default_rng(0)
    ds = Dataset()
    for i in range(n_rally):
        ds.add_state(synth_incoming(rng, "rally", **kw), cycle=i * cycles // max(n_rally, 1), **kw)
    for i in range(n_serve):
        ds.add_state(synth_incoming(rng, "serve", **kw), is_serve=True, cycle=i * cycles // max(n_serve, 1), **kw)
    return ds


def synth_observed(state, flight=DEFAULT_FLIGHT, contact=DEFAULT_CONTACT, table=DEFAULT_TABLE,
                   duration=0.5, noise=0.0, rng=None, t0=0.0, rate=OBS_RATE_HZ):
    """Sample a simulated flight at the camera rate, optionally with Gaussian position noise."""
    n = int(duration * rate) + 1
    t = t0 + np.arange(n) / rate
    pos = _sim_positions(state.to_array(), t, flight, contact, table)
    # keep the part of the flight that stays above the table plane
    below = np.nonzero(pos[:, 2] < 0.0)[0]
    if len(below):
        t, pos = t[: below[0]], pos[: below[0]]
    if noise > 0:
        pos = pos + (rng if rng is not None else np.random.default_rng(0)).normal(0, noise, pos.shape)
    return ObservedTrajectory(t, pos, source="synthetic")


def synth_rally_stream(rng, hits=2, flight=DEFAULT_FLIGHT, contact=DEFAULT_CONTACT, table=DEFAULT_TABLE, rate=OBS_RATE_HZ):
    """A stream with ``hits`` alternating returns. Returns (stream, true hit times)."""
    state = synth_incoming(rng, "rally", flight, contact, table)
    ts, ps, hit_times = [], [], []
    t = 0.0
    direction = -1.0
    for h in range(hits + 1):
        dur = 2.0
        traj = _sim_positions(state.to_array(), np.arange(0, dur, 1.0 / rate), flight, contact, table)
        times = t + np.arange(len(traj)) / rate
        plane = -1.6 if direction < 0 else 1.6
        idx = np.nonzero(traj[:, 1] * direction >= plane * direction)[0]
        stop = int(idx[0]) if len(idx) else len(traj)
        if h == hits:
            stop = min(stop, len(traj))
        ts.append(times[:stop])
        ps.append(traj[:stop])
        if h == hits or stop == 0:
            break
        t = times[stop - 1] + 1.0 / rate
        hit_times.append(t)
        pos = traj[stop - 1]
        direction = -direction
        speed = rng.uniform(4.0, 7.0)
        target = [rng.uniform(-0.5, 0.5), direction * rng.uniform(0.4, 1.1)]
        v, _ = aim(pos, np.zeros(3), speed, target, flight, contact, table, direction=direction)
        state = BallState(pos, v, np.zeros(3))
    return ObservedTrajectory(np.concatenate(ts), np.concatenate(ps), source="synthetic-rally"), hit_times
