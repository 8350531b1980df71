"""Blackbox evolution strategies with antithetic, orthogonal perturbations and elite filtering."""

from __future__ import annotations

import inspect
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .errors import DivergenceError, PreconditionError


@dataclass(frozen=True)
class EsConfig:
    step_size: float = 0.00375
    perturbation_std: float = 0.025
    num_perturbations: int = 200
    rollouts_per_perturbation: int = 15
    keep_fraction: float = 0.30
    max_env_steps: int = 200
    orthogonal: bool = True
    normalize_obs: bool = True

    def __post_init__(self):
        if self.num_perturbations < 1 or self.rollouts_per_perturbation < 1:
            raise PreconditionError("num_perturbations and rollouts_per_perturbation must be >= 1")
        if not 0.0 < self.keep_fraction <= 1.0:
            raise PreconditionError("keep_fraction must lie in (0, 1]")
        if not self.perturbation_std > 0:
            raise PreconditionError("perturbation_std must be positive")

    @property
    def num_elite(self):
        return max(1, int(math.ceil(self.keep_fraction * self.num_perturbations - 1e-9)))

    def to_dict(self):
        return asdict(self)

    def with_(self, **kw):
        return replace(self, **kw)


PRESETS = {
    "simulation": EsConfig(),
    "adapter": EsConfig(
        step_size=0.00125,
        num_perturbations=5,
        rollouts_per_perturbation=3,
        keep_fraction=0.60,
    ),
}


def preset(name, **overrides):
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise PreconditionError(f"unknown optimizer preset {name!r}; known: {sorted(PRESETS)}") from None
    return replace(cfg, **overrides) if overrides else cfg


def orthogonal_perturbations(count, dim, rng):
    """Gaussian directions, orthogonalized in blocks of at most ``dim`` rows.

    Each row keeps the norm of the Gaussian draw it came from, so row norms follow
    the chi distribution with ``dim`` degrees of freedom.
    """
    if dim <= 0:
        raise PreconditionError("dim must be positive")
    if count <= 0:
        return np.zeros((0, dim))
    out = np.empty((count, dim))
    start = 0
    while start < count:
        b = min(dim, count - start)
        g = rng.standard_normal((b, dim))
        norms = np.linalg.norm(g, axis=1)
        q, r = np.linalg.qr(g.T)
        # fix the QR sign ambiguity so the basis follows the draw
        q = q * np.sign(np.where(np.diag(r) == 0, 1.0, np.diag(r)))
        out[start : start + b] = q.T * norms[:, None]
        start += b
    return out


def gaussian_perturbations(count, dim, rng):
    if dim <= 0:
        raise PreconditionError("dim must be positive")
    return rng.standard_normal((count, dim))


def _takes_rng(fn):
    try:
        params = [
            p
            for p in inspect.signature(fn).parameters.values()
            if p.kind in (p.POSITIONAL_ONLY, p.POSITIONAL_OR_KEYWORD) and p.default is p.empty
        ]
    except (TypeError, ValueError):
        return False
    return len(params) >= 2


@dataclass
class StepInfo:
    mean_fitness: float
    best_fitness: float
    elite: np.ndarray
    gradient: np.ndarray


def es_step_info(params, evaluate, config, rng, map_fn=map):
    """One ES update, returning (new params, StepInfo).

    ``evaluate`` is either ``f(theta)`` or ``f(theta, rng)``. Both members of an
    antithetic pair see the same rollout seeds. ``map_fn`` may be a parallel map;
    the reduction below is ordered by perturbation index either way.
    """
    theta = np.asarray(params, dtype=float)
    dim = theta.size
    P = config.num_perturbations
    k = config.rollouts_per_perturbation
    sigma = config.perturbation_std
    make = orthogonal_perturbations if config.orthogonal else gaussian_perturbations
    eps = make(P, dim, rng)
    seeds = rng.integers(0, 2**63 - 1, size=(P, k))
    with_rng = _takes_rng(evaluate)

    def rollout_mean(job):
        vec, row = job
        total = 0.0
        for j in range(k):
            if with_rng:
                total += float(evaluate(vec, np.random.default_rng(int(seeds[row, j]))))
            else:
                total += float(evaluate(vec))
        return total / k

    jobs = []
    for i in range(P):
        jobs.append((theta + sigma * eps[i], i))
        jobs.append((theta - sigma * eps[i], i))
    vals = np.fromiter(map_fn(rollout_mean, jobs), dtype=float, count=2 * P)
    if not np.all(np.isfinite(vals)):
        raise DivergenceError("non-finite fitness during ES step", checkpoint=theta.copy())
    f_plus = vals[0::2]
    f_minus = vals[1::2]
    f_bar = vals.mean()
    score = np.maximum(np.abs(f_plus - f_bar), np.abs(f_minus - f_bar))
    n_elite = config.num_elite
    elite = np.argsort(-score, kind="stable")[:n_elite]
    std_f = float(np.concatenate([f_plus[elite], f_minus[elite]]).std())
    if std_f == 0.0:
        grad = np.zeros(dim)
    else:
        # ARS-style normalization; an extra 1/(2 sigma) overshoots at these step sizes
        diffs = f_plus[elite] - f_minus[elite]
        grad = diffs @ eps[elite] / (n_elite * std_f)
    info = StepInfo(float(f_bar), float(vals.max()), np.sort(elite), grad)
    return theta + config.step_size * grad, info


def es_step(params, evaluate, config, rng, map_fn=map):
    return es_step_info(params, evaluate, config, rng, map_fn)[0]


def run_es(params, evaluate, config, rng, iterations, callback=None, keep_best=None):
    """Iterate es_step. Returns (params, curve rows (iteration, mean fitness, best fitness)).

    With ``keep_best`` (a scoring function of params) the best-scoring iterate,
    including the start, is returned instead of the last one.
    """
    theta = np.asarray(params, dtype=float).copy()
    curve = []
    best = (keep_best(theta), theta.copy()) if keep_best else None
    for it in range(iterations):
        theta, info = es_step_info(theta, evaluate, config, rng)
        curve.append((it, info.mean_fitness, info.best_fitness))
        if keep_best:
            s = keep_best(theta)
            if s > best[0]:
                best = (s, theta.copy())
        if callback:
            callback(it, theta, info)
    return (best[1] if keep_best else theta), curve


class RunningNormalizer:
    """Per-dimension running mean and variance (Welford)."""

    def __init__(self, dim):
        self.dim = int(dim)
        self.count = 0
        self.mean = np.zeros(self.dim)
        self._m2 = np.zeros(self.dim)

    @property
    def variance(self):
        if self.count == 0:
            return np.ones(self.dim)
        return self._m2 / self.count

    def update(self, obs):
        x = self._check(obs)
        self.count += 1
        delta = x - self.mean
        self.mean = self.mean + delta / self.count
        self._m2 = self._m2 + delta * (x - self.mean)

    def _check(self, obs):
        x = np.asarray(obs, dtype=float).reshape(-1)
        if x.size != self.dim:
            raise PreconditionError(f"observation has {x.size} dims, normalizer expects {self.dim}")
        return x

    def state(self):
        return {"count": self.count, "mean": self.mean.tolist(), "m2": self._m2.tolist()}

    @classmethod
    def from_state(cls, st):
        n = cls(len(st["mean"]))
        n.count = int(st["count"])
        n.mean = np.asarray(st["mean"], dtype=float)
        n._m2 = np.asarray(st["m2"], dtype=float)
        return n

    def copy(self):
        return RunningNormalizer.from_state(self.state())


def normalize(obs, normalizer, update=False):
    x = normalizer._check(obs)
    if update:
        normalizer.update(x)
    return (x - normalizer.mean) / np.sqrt(normalizer.variance + 1e-8)
