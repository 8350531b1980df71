"""Per-skill performance lookup tables keyed by the 6-dim initial ball state."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyTableError, PreconditionError
from .skills import ContextPool, SkillEnv, finish_shot

KEY_DIM = 6


@dataclass
class SkillMetrics:
    land_rate: float
    hit_velocity_y: float
    landing_mean: np.ndarray
    landing_std: np.ndarray
    sample_count: int = 1
    truncated: bool = False

    def __post_init__(self):
        self.landing_mean = np.asarray(self.landing_mean, dtype=float)
        self.landing_std = np.asarray(self.landing_std, dtype=float)
        if not 0.0 <= self.land_rate <= 1.0:
            raise PreconditionError(f"land_rate {self.land_rate} outside [0, 1]")
        if self.sample_count < 1:
            raise PreconditionError("sample_count must be >= 1")

    @classmethod
    def from_outcome(cls, landed, hit_velocity_y=0.0, landing=None):
        """Metrics for one observed ball; a missing landing leaves the landing fields undefined (NaN)."""
        lm = np.full(2, np.nan) if landing is None else np.asarray(landing, dtype=float)[:2]
        return cls(1.0 if landed else 0.0, float(hit_velocity_y), lm, np.zeros(2), 1)


def key6(state):
    a = state.to_array() if hasattr(state, "to_array") else np.asarray(state, dtype=float)
    return np.asarray(a[:KEY_DIM], dtype=float)


class DescriptorTable:
    """Keys, per-key metrics and an exact k-d tree under per-dimension std scaling.

    Ties in distance are broken by the lower key id.
    """

    def __init__(self, skill_id, keys, land, hit_vel, landing_mean, landing_std, counts, ids=None, scale=None):
        self.skill_id = int(skill_id)
        self.keys = np.asarray(keys, dtype=float).reshape(-1, KEY_DIM)
        n = len(self.keys)
        if n == 0:
            raise EmptyTableError(f"descriptor table for skill {skill_id} has no entries")
        self.land = np.asarray(land, dtype=float).copy()
        self.hit_vel = np.asarray(hit_vel, dtype=float).copy()
        self.landing_mean = np.asarray(landing_mean, dtype=float).reshape(n, 2).copy()
        self.landing_std = np.asarray(landing_std, dtype=float).reshape(n, 2).copy()
        self.counts = np.asarray(counts, dtype=np.int64).copy()
        self.ids = np.arange(n) if ids is None else np.asarray(ids, dtype=np.int64)
        if scale is None:
            scale = self.keys.std(axis=0)
        scale = np.asarray(scale, dtype=float)
        self.scale = np.where(scale > 1e-12, scale, 1.0)
        self._norm = self.keys / self.scale
        self.tree = cKDTree(self._norm)
        self.real_log = []

    def __len__(self):
        return len(self.keys)

    def neighbors(self, key, k):
        """Indices of the exact k nearest keys, ordered by (distance, id); plus a truncation flag."""
        if k < 1:
            raise PreconditionError("k must be >= 1")
        n = len(self)
        truncated = k > n
        k = min(k, n)
        q = np.asarray(key, dtype=float)[:KEY_DIM] / self.scale
        d, _ = self.tree.query(q, k=k)
        radius = float(np.max(np.atleast_1d(d)))
        cand = np.asarray(self.tree.query_ball_point(q, radius * (1 + 1e-9) + 1e-12), dtype=np.int64)
        dist = np.sqrt(((self._norm[cand] - q) ** 2).sum(axis=1))
        order = np.lexsort((self.ids[cand], dist))
        return cand[order[:k]], truncated

    def brute_neighbors(self, key, k):
        q = np.asarray(key, dtype=float)[:KEY_DIM] / self.scale
        dist = np.sqrt(((self._norm - q) ** 2).sum(axis=1))
        return np.lexsort((self.ids, dist))[: min(k, len(self))]

    def metrics_at(self, i):
        return SkillMetrics(float(self.land[i]), float(self.hit_vel[i]), self.landing_mean[i].copy(),
                            self.landing_std[i].copy(), int(self.counts[i]))

    def copy(self):
        t = DescriptorTable(self.skill_id, self.keys, self.land, self.hit_vel, self.landing_mean,
                            self.landing_std, self.counts, self.ids, self.scale)
        t.real_log = list(self.real_log)
        return t


def query(table, ball6, k=25):
    """Sample-weighted average of the exact k nearest neighbors' metrics."""
    idx, truncated = table.neighbors(key6(ball6), k)
    w = table.counts[idx].astype(float)
    w = w / w.sum()
    return SkillMetrics(
        float(np.clip(w @ table.land[idx], 0.0, 1.0)),
        float(w @ table.hit_vel[idx]),
        w @ table.landing_mean[idx],
        w @ table.landing_std[idx],
        int(table.counts[idx].sum()),
        truncated,
    )


def update_with_real(table, ball6, observed, k=25):
    """Equal-weight merge of an observed outcome into the k nearest entries, in place.

    Each neighbor's metric becomes the mean of stored and observed; landing std is
    merged as the pooled deviation of two equally weighted groups. Undefined
    (NaN) observed landing fields leave the stored ones untouched.
    """
    idx, _ = table.neighbors(key6(ball6), k)
    table.land[idx] = np.clip(0.5 * (table.land[idx] + observed.land_rate), 0.0, 1.0)
    if math.isfinite(observed.hit_velocity_y):
        table.hit_vel[idx] = 0.5 * (table.hit_vel[idx] + observed.hit_velocity_y)
    if np.all(np.isfinite(observed.landing_mean)):
        m1, s1 = table.landing_mean[idx], table.landing_std[idx]
        m2, s2 = observed.landing_mean, observed.landing_std
        mean = 0.5 * (m1 + m2)
        var = 0.5 * (s1**2 + s2**2) + 0.25 * (m1 - m2) ** 2
        table.landing_mean[idx] = mean
        table.landing_std[idx] = np.sqrt(var)
    table.counts[idx] += observed.sample_count
    table.real_log.append((observed.land_rate, observed.hit_velocity_y, *np.asarray(observed.landing_mean, dtype=float)))
    return table


def _records_for(skill, dataset):
    recs = dataset.serves() if skill.spec.is_serve_receiver else dataset.rally()
    return recs


def _rep_rng(seed, skill_id, record_id, rep):
    return np.random.default_rng([int(seed), int(skill_id), int(record_id), int(rep)])


def build_descriptor(skill, dataset, repetitions=10, env=None, seed=0, pool=None, records=None, rep_offset=0):
    """Simulate ``skill`` on every relevant record ``repetitions`` times and tabulate metrics.

    The stroke plan is computed once per (skill, record) from a noise-free
    observation; repetitions differ only in execution noise, each with its own
    seed (seed, skill, record, rep) so that builds compose across repetitions.
    """
    env = env or SkillEnv()
    recs = list(records) if records is not None else _records_for(skill, dataset)
    if not recs:
        raise EmptyTableError("no records to build a descriptor from")
    if pool is None:
        pool = ContextPool([r.initial for r in recs], env)
    keys, land, hv, lm, ls, counts, ids = [], [], [], [], [], [], []
    any_contact = False
    for i, r in enumerate(recs):
        ctx = pool.get(skill, i)
        results = []
        if ctx is not None:
            plan = skill.plan_contact(ctx.estimate, env)
            for j in range(repetitions):
                results.extend(finish_shot(ctx, plan, env, _rep_rng(seed, skill.spec.id, r.id, rep_offset + j)))
        n = max(len(results), 1)
        landed = [x for x in results if x.landed]
        touched = [x for x in results if x.contacted]
        pts = np.array([x.landing for x in touched if x.landing is not None]).reshape(-1, 2)
        any_contact |= bool(touched)
        keys.append(key6(r.initial))
        land.append(len(landed) / n if results else 0.0)
        hv.append(float(np.median([x.hit_velocity_y for x in touched])) if touched else 0.0)
        lm.append(pts.mean(axis=0) if len(pts) else np.zeros(2))
        ls.append(pts.std(axis=0) if len(pts) else np.zeros(2))
        counts.append(max(repetitions, 1))
        ids.append(r.id)
    if not any_contact:
        raise EmptyTableError(f"skill {skill.spec.id} reached no ball in the corpus")
    return DescriptorTable(skill.spec.id, keys, land, hv, lm, ls, counts, ids)


def build_all(skills, dataset, repetitions=10, env=None, seed=0, progress=None):
    """Descriptor tables for a roster, sharing prepared shots across skills."""
    env = env or SkillEnv()
    rally = dataset.rally()
    serves = dataset.serves()
    pools = {False: ContextPool([r.initial for r in rally], env), True: ContextPool([r.initial for r in serves], env)}
    out = {}
    for sk in skills:
        recs = serves if sk.spec.is_serve_receiver else rally
        if not recs:
            continue
        out[sk.spec.id] = build_descriptor(sk, dataset, repetitions, env, seed, pools[sk.spec.is_serve_receiver], recs)
        if progress:
            progress(sk.spec.id)
    return out


_HEADER = "# ttagent-descriptor"


def save_table(table, path):
    """Header line (skill id, scales, count) then one row per key; floats written with repr for exactness."""
    with open(path, "w") as fh:
        head = {"skill_id": table.skill_id, "scale": [repr(float(x)) for x in table.scale], "count": len(table)}
        fh.write(f"{_HEADER} {json.dumps(head, sort_keys=True)}\n")
        for i in range(len(table)):
            row = [str(int(table.ids[i]))] + [repr(float(x)) for x in table.keys[i]]
            row += [repr(float(table.land[i])), repr(float(table.hit_vel[i]))]
            row += [repr(float(x)) for x in table.landing_mean[i]] + [repr(float(x)) for x in table.landing_std[i]]
            row += [str(int(table.counts[i]))]
            fh.write(",".join(row) + "\n")


def load_table(path):
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith(_HEADER):
            raise PreconditionError(f"{path} is not a descriptor table")
        head = json.loads(first[len(_HEADER):])
        rows = [ln.strip().split(",") for ln in fh if ln.strip()]
    if len(rows) != head["count"]:
        raise PreconditionError(f"{path}: header count {head['count']} but {len(rows)} rows")
    a = np.array([[float(x) for x in r] for r in rows])
    return DescriptorTable(head["skill_id"], a[:, 1:7], a[:, 7], a[:, 8], a[:, 9:11], a[:, 11:13],
                           a[:, 13].astype(np.int64), a[:, 0].astype(np.int64), [float(x) for x in head["scale"]])


@dataclass
class ReportRow:
    skill_id: int
    name: str
    sim_land_rate: float
    sim_hit_velocity_y: float
    sim_landing_mean: tuple
    real_count: int = 0
    real_land_rate: float = float("nan")
    real_hit_velocity_y: float = float("nan")
    extra: dict = field(default_factory=dict)


def report(tables, names=None):
    """Per-skill summary: simulated averages over the table, with any real observations alongside."""
    rows = []
    for sid in sorted(tables):
        t = tables[sid]
        row = ReportRow(sid, (names or {}).get(sid, str(sid)), float(t.land.mean()), float(t.hit_vel.mean()),
                        tuple(np.round(t.landing_mean.mean(axis=0), 4)))
        if t.real_log:
            log = np.array(t.real_log, dtype=float)
            row.real_count = len(log)
            row.real_land_rate = float(log[:, 0].mean())
            row.real_hit_velocity_y = float(np.nanmean(log[:, 1]))
        rows.append(row)
    return rows


def format_report(rows):
    lines = [f"{'skill':>5} {'name':<18} {'sim land':>8} {'sim vy':>7} {'landing mean':>16} {'real n':>6} {'real land':>9}"]
    for r in rows:
        lm = f"({r.sim_landing_mean[0]:+.2f},{r.sim_landing_mean[1]:+.2f})"
        real = f"{r.real_land_rate:9.3f}" if r.real_count else f"{'-':>9}"
        lines.append(f"{r.skill_id:>5} {r.name:<18} {r.sim_land_rate:8.3f} {r.sim_hit_velocity_y:7.2f} {lm:>16} {r.real_count:>6} {real}")
    return "\n".join(lines)
