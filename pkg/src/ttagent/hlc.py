"""High-level controller: style selection, serve-spin classification, heuristic shortlists and bandit preferences."""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .ballistics import BACKHAND, CENTER, FOREHAND, TOPSPIN, UNDERSPIN
from .descriptors import query
from .errors import FitFailedError, MissingArtifactError, PreconditionError
from .optimizer import EsConfig, es_step_info
from .skills import (
    GENERALIST,
    TOPSPIN_SERVE,
    UNDERSPIN_SERVE,
    SkillEnv,
    contact_point,
    execute_shot,
)

# lateral band on the opponent's half; the opponent faces -y, so their forehand is at -x
SIDE_BAND = 0.2


def opponent_side(x):
    if x < -SIDE_BAND:
        return FOREHAND
    if x > SIDE_BAND:
        return BACKHAND
    return CENTER


# ------------------------------------------------------------------ opponent model


@dataclass
class OpponentStats:
    """How often the opponent returned the robot's balls, in total and by landing side."""

    hits: dict = field(default_factory=lambda: {FOREHAND: 0, BACKHAND: 0, CENTER: 0})
    attempts: dict = field(default_factory=lambda: {FOREHAND: 0, BACKHAND: 0, CENTER: 0})

    @property
    def total_attempts(self):
        return sum(self.attempts.values())

    @property
    def total_hits(self):
        return sum(self.hits.values())

    def hit_rate(self, side=None):
        if side is None:
            n = self.total_attempts
            return self.total_hits / n if n else 0.0
        n = self.attempts[side]
        return self.hits[side] / n if n else 0.0

    def record(self, landing_x, returned):
        side = opponent_side(landing_x)
        self.attempts[side] += 1
        self.hits[side] += bool(returned)
        return side

    def weak_side(self):
        """FOREHAND or BACKHAND with the lower return rate, or None when they are indistinguishable."""
        fh, bh = self.hit_rate(FOREHAND), self.hit_rate(BACKHAND)
        if self.attempts[FOREHAND] == 0 and self.attempts[BACKHAND] == 0 or fh == bh:
            return None
        return FOREHAND if fh < bh else BACKHAND

    def to_dict(self):
        return {"hits": dict(self.hits), "attempts": dict(self.attempts)}

    @classmethod
    def from_dict(cls, d):
        return cls(dict(d["hits"]), dict(d["attempts"]))


# ------------------------------------------------------------------ preferences


def softmax(h):
    m = max(h)
    e = [math.exp(x - m) for x in h]
    s = sum(e)
    return [x / s for x in e]


def sample_index(probs, rng):
    u = rng.random()
    acc = 0.0
    for i, p in enumerate(probs):
        acc += p
        if u < acc:
            return i
    return len(probs) - 1


@dataclass
class PreferenceState:
    """Gradient-bandit state. Lists rather than arrays keep the per-shot update cheap."""

    H: list
    avg_reward: float = 0.0
    A: list = None
    t: int = 0
    alpha: float = 0.1
    baseline_H: list = None

    def __post_init__(self):
        self.H = [float(x) for x in self.H]
        if self.A is None:
            self.A = [0] * len(self.H)
        if self.baseline_H is None:
            self.baseline_H = list(self.H)
        if not self.alpha > 0:
            raise PreconditionError("alpha must be positive")

    @classmethod
    def fresh(cls, n_skills, alpha=0.1, baseline=None):
        base = [0.0] * n_skills if baseline is None else [float(x) for x in baseline]
        return cls(list(base), alpha=alpha, baseline_H=list(base))

    def reset(self):
        """Back to the baseline preferences, as for a new opponent."""
        self.H = list(self.baseline_H)
        self.avg_reward = 0.0
        self.A = [0] * len(self.H)
        self.t = 0

    def probabilities(self):
        return softmax(self.H)

    def copy(self):
        return PreferenceState(list(self.H), self.avg_reward, list(self.A), self.t, self.alpha, list(self.baseline_H))

    def to_dict(self):
        return {"H": self.H, "avg_reward": self.avg_reward, "A": self.A, "t": self.t, "alpha": self.alpha,
                "baseline_H": self.baseline_H}

    @classmethod
    def from_dict(cls, d):
        return cls(d["H"], d["avg_reward"], list(d["A"]), int(d["t"]), d["alpha"], d["baseline_H"])


def update_preferences(batch, prefs, refresh_each_shot=False):
    """Gradient-bandit update over a batch of (skill_id, reward) pairs, in place.

    P is taken once from H at the start of the batch and the chosen-skill mask Z
    accumulates across the batch. ``refresh_each_shot`` recomputes P and uses a
    one-hot Z per shot instead.
    """
    H = prefs.H
    n = len(H)
    P = softmax(H)
    Z = [0.0] * n
    alpha = prefs.alpha
    for sid, reward in batch:
        if not (0 <= sid < n) or int(sid) != sid:
            raise PreconditionError(f"unknown skill id {sid}")
        prefs.t += 1
        prefs.A[sid] += 1
        prefs.avg_reward += (reward - prefs.avg_reward) / prefs.t
        if refresh_each_shot:
            P = softmax(H)
            Z = [0.0] * n
        Z[sid] = 1.0
        g = alpha * (reward - prefs.avg_reward)
        for i in range(n):
            H[i] += g * (Z[i] - P[i])
    return prefs


def reference_update(batch, H, avg_reward, A, t, alpha):
    """Line-by-line transcription of the preference recurrence, used as a test oracle."""
    H = list(H)
    A = list(A)
    m = max(H)
    ex = [math.exp(h - m) for h in H]
    P = [e / sum(ex) for e in ex]
    Z = [0] * len(H)
    for sid, R in batch:
        t = t + 1
        A[sid] = A[sid] + 1
        avg_reward = avg_reward + (R - avg_reward) / t
        Z[sid] = 1
        for i in range(len(H)):
            H[i] = H[i] + alpha * (R - avg_reward) * (Z[i] - P[i])
    return H, avg_reward, A, t


def adaptation_report(before, after, names=None):
    """Per-skill percentage change of selection probability softmax(H) between two snapshots."""
    p0, p1 = softmax(before), softmax(after)
    rows = []
    for i, (a, b) in enumerate(zip(p0, p1)):
        rows.append({"skill": i, "name": (names or {}).get(i, str(i)), "H_before": before[i], "H_after": after[i],
                     "pct_change": 100.0 * (b - a) / a})
    return rows


class PreferenceStore:
    """Per-opponent preferences and opponent statistics persisted as one JSON document."""

    def __init__(self, path=None):
        self.path = path
        self.data = {}
        if path:
            try:
                with open(path) as fh:
                    self.data = json.load(fh)
            except FileNotFoundError:
                self.data = {}

    def load(self, opponent_id, n_skills, alpha=0.1, baseline=None):
        d = self.data.get(str(opponent_id))
        if d is None:
            return PreferenceState.fresh(n_skills, alpha, baseline), OpponentStats()
        return PreferenceState.from_dict(d["prefs"]), OpponentStats.from_dict(d["opponent"])

    def save(self, opponent_id, prefs, opp):
        self.data[str(opponent_id)] = {"prefs": prefs.to_dict(), "opponent": opp.to_dict()}
        if self.path:
            with open(self.path, "w") as fh:
                json.dump(self.data, fh, indent=1, sort_keys=True)


# ------------------------------------------------------------------ spin classification

SPIN_FEATURES = 18
SPIN_VOTE_WINDOW = 5
SPIN_VOTE_MIN = 4
AUGMENT_WINDOW_S = 0.1
SERVE_RATE_HZ = 125.0


def augmentation_samples(rate=SERVE_RATE_HZ, window=AUGMENT_WINDOW_S):
    return int(math.floor(window * rate + 1e-9))


def extract_spin_features(history):
    """18 features from >= 6 synchronized rows of (paddle xyz, paddle normal xyz, ball xyz).

    For each of the last three timestamps t: paddle z[t] - z[t-3], normal[t] - normal[t-3],
    paddle z - ball z, and paddle-ball distance; stacked oldest first.
    """
    h = np.asarray(history, dtype=float)
    if h.ndim != 2 or h.shape[1] < 9:
        raise PreconditionError("history rows must hold paddle position, paddle normal and ball position")
    if len(h) < 6:
        raise PreconditionError(f"need at least 6 timestamps, got {len(h)}")
    out = np.empty(SPIN_FEATURES)
    n = len(h)
    for j, t in enumerate(range(n - 3, n)):
        p, nrm, b = h[t, 0:3], h[t, 3:6], h[t, 6:9]
        out[6 * j] = p[2] - h[t - 3, 2]
        out[6 * j + 1 : 6 * j + 4] = nrm - h[t - 3, 3:6]
        out[6 * j + 4] = p[2] - b[2]
        out[6 * j + 5] = float(np.linalg.norm(p - b))
    return out


def synth_serve_motion(rng, underspin, frames=30, noise=0.004, ambiguity=0.25):
    """Opponent paddle and ball rows at 125 Hz up to the serve contact (last row).

    Underspin serves chop down with an opening face; topspin serves brush up with a
    closing face. ``ambiguity`` is the chance that the stroke shape is disguised.
    """
    dt = 1.0 / SERVE_RATE_HZ
    t = np.arange(frames) * dt - (frames - 1) * dt
    sign = -1.0 if underspin else 1.0
    if rng.random() < ambiguity:
        sign = rng.choice([-1.0, 1.0]) * rng.uniform(0.0, 0.6)
    vz = sign * rng.uniform(0.6, 1.6)
    tilt_rate = sign * rng.uniform(2.0, 6.0)
    x0 = rng.uniform(-0.4, 0.4)
    paddle = np.column_stack([x0 + 0.0 * t, 1.6 + rng.uniform(1.0, 2.0) * t, 0.12 + vz * t])
    ang = -0.3 + tilt_rate * t * 0.5
    normal = np.column_stack([np.zeros_like(t), -np.cos(ang), -np.sin(-ang) * sign])
    normal /= np.linalg.norm(normal, axis=1, keepdims=True)
    ball_z0 = paddle[-1, 2] + 0.02
    ball = np.column_stack([np.full_like(t, x0), np.full_like(t, paddle[-1, 1]), ball_z0 - 0.5 * 9.81 * t**2 * 0 - 0.8 * t])
    rows = np.hstack([paddle, normal, ball])
    rows += rng.normal(0.0, noise, rows.shape)
    return rows


class SpinClassifier:
    """Standardized 18-dim features into a (128, 64) perceptron; class 1 is underspin."""

    def __init__(self, hidden=(128, 64), seed=0, max_iter=400):
        from sklearn.neural_network import MLPClassifier
        from sklearn.pipeline import make_pipeline
        from sklearn.preprocessing import StandardScaler

        self.model = make_pipeline(
            StandardScaler(),
            MLPClassifier(hidden_layer_sizes=tuple(hidden), random_state=seed, max_iter=max_iter),
        )
        self.trained = False
        self.metrics = {}

    def fit(self, X, y):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=int)
        if X.shape[1] != SPIN_FEATURES:
            raise PreconditionError(f"spin features must be {SPIN_FEATURES}-dim")
        if len(np.unique(y)) < 2:
            raise FitFailedError("spin corpus has a single class", best=None, residual=float("nan"))
        import warnings

        from sklearn.exceptions import ConvergenceWarning

        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            self.model.fit(X, y)
        self.trained = True
        return self

    def predict_proba(self, features):
        if not self.trained:
            raise MissingArtifactError("spin classifier is not trained")
        x = np.asarray(features, dtype=float).reshape(-1, SPIN_FEATURES)
        return self.model.predict_proba(x)

    def predict_raw(self, features):
        p = self.predict_proba(features)
        return [UNDERSPIN if row[1] > 0.5 else TOPSPIN for row in p]


def vote(raw_history):
    """Underspin only when at least 4 of the last 5 raw predictions were underspin."""
    last = list(raw_history)[-SPIN_VOTE_WINDOW:]
    if len(last) < SPIN_VOTE_WINDOW:
        return TOPSPIN
    return UNDERSPIN if sum(r == UNDERSPIN for r in last) >= SPIN_VOTE_MIN else TOPSPIN


def classify_spin(features, classifier, history):
    """Append the raw prediction for ``features`` to ``history`` and return the voted label."""
    history.append(classifier.predict_raw(features)[0])
    return vote(history)


def serve_queries(rows, n=SPIN_VOTE_WINDOW):
    """Feature vectors for the last ``n`` frames of a serve motion, oldest first."""
    return [extract_spin_features(rows[: len(rows) - k]) for k in range(n - 1, -1, -1)]


def label_serve(rows, classifier):
    hist = deque(maxlen=SPIN_VOTE_WINDOW)
    label = TOPSPIN
    for f in serve_queries(rows):
        label = classify_spin(f, classifier, hist)
    return label


def spin_training_set(motions, labels, augment=True):
    """Features at the contact frame plus, with augmentation, at each frame of the preceding 100 ms."""
    X, y = [], []
    extra = augmentation_samples() if augment else 0
    for rows, lab in zip(motions, labels):
        for k in range(0, extra + 1):
            if len(rows) - k < 6:
                break
            X.append(extract_spin_features(rows[: len(rows) - k]))
            y.append(int(lab))
    return np.array(X), np.array(y)


def train_spin_classifier(motions, labels, seed=0, holdout=0.25, augment=True):
    """Fit on labelled serve motions (label 1 = underspin) and report held-out underspin precision/recall."""
    labels = np.asarray(labels, dtype=int)
    if len(np.unique(labels)) < 2:
        raise FitFailedError("spin corpus has a single class", best=None, residual=float("nan"))
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(motions))
    n_test = int(round(holdout * len(motions)))
    test, train = order[:n_test], order[n_test:]
    X, y = spin_training_set([motions[i] for i in train], labels[train], augment)
    clf = SpinClassifier(seed=seed).fit(X, y)
    if n_test:
        Xt = np.array([extract_spin_features(motions[i]) for i in test])
        yt = labels[test]
        pred = (clf.predict_proba(Xt)[:, 1] > 0.5).astype(int)
        tp = int(np.sum((pred == 1) & (yt == 1)))
        fp = int(np.sum((pred == 1) & (yt == 0)))
        fn = int(np.sum((pred == 0) & (yt == 1)))
        clf.metrics = {
            "accuracy": float(np.mean(pred == yt)),
            "underspin_precision": tp / (tp + fp) if tp + fp else float("nan"),
            "underspin_recall": tp / (tp + fn) if tp + fn else float("nan"),
            "n_test": int(n_test),
        }
    return clf


# ------------------------------------------------------------------ style selection

STYLE_FEATURES = 4


def _intercept_x(ball, env):
    arr = np.asarray(ball.to_array() if hasattr(ball, "to_array") else ball, dtype=float).copy()
    if arr.size >= 9:
        arr[6:9] = 0.0
    else:
        arr = np.concatenate([arr[:6], np.zeros(3)])
    cp = contact_point(arr, -1.6, env, horizon=1.5)
    if cp is not None:
        return float(cp[1][0])
    t = (arr[1] + 1.6) / max(-arr[4], 1e-3)
    return float(arr[0] + arr[3] * t)


def style_features(ball, env=None):
    """Predicted lateral intercept, lateral position, lateral velocity and a bias, all in metres or m/s."""
    env = env or SkillEnv()
    arr = np.asarray(ball.to_array() if hasattr(ball, "to_array") else ball, dtype=float)
    if arr.ndim == 2:
        arr = arr[-1]
    return np.array([_intercept_x(arr, env), arr[0], arr[3], 1.0])


class StyleModel:
    """Logistic forehand/backhand selector; weights start at the table-half heuristic."""

    HEURISTIC = np.array([10.0, 0.0, 0.0, 0.0])

    def __init__(self, weights=None, fallback=True, env=None):
        self.weights = None if weights is None else np.asarray(weights, dtype=float)
        self.fallback = fallback
        self.env = env or SkillEnv()

    @classmethod
    def heuristic(cls, env=None):
        return cls(cls.HEURISTIC.copy(), env=env)

    def prob_forehand(self, feats):
        z = float(np.clip(self.weights @ feats, -50, 50))
        return 1.0 / (1.0 + math.exp(-z))

    def select(self, ball):
        feats = style_features(ball, self.env)
        if self.weights is None:
            if not self.fallback:
                raise MissingArtifactError("style model is untrained and fallback is disabled")
            return FOREHAND if feats[0] >= 0 else BACKHAND
        return FOREHAND if self.prob_forehand(feats) >= 0.5 else BACKHAND


def select_style(ball_obs_history, model=None):
    return (model or StyleModel()).select(ball_obs_history)


def style_outcomes(balls, fh_skill, bh_skill, env=None, reps=3, seed=0):
    """Per-ball land rates of the forehand and backhand generalists, plus style features."""
    env = env or SkillEnv()
    F, yf, yb = [], [], []
    for i, b in enumerate(balls):
        F.append(style_features(b, env))
        for sk, acc in ((fh_skill, yf), (bh_skill, yb)):
            res = execute_shot(sk, b, env, np.random.default_rng([seed, i, sk.spec.id]), obs_noise=False, reps=reps)
            res = res if isinstance(res, list) else [res]
            acc.append(np.mean([r.landed for r in res]))
    return np.array(F), np.array(yf), np.array(yb)


def style_land_rate(weights, F, yf, yb):
    z = F @ weights
    return float(np.mean(np.where(z >= 0, yf, yb)))


def train_style_model(train, validation=None, cfg=None, rng=None, iterations=100, env=None):
    """ES on logistic weights with frozen generalist outcomes; keeps the best validation iterate.

    ``train`` and ``validation`` are (features, forehand outcomes, backhand outcomes)
    tuples from style_outcomes. Starts from the table-half heuristic, so the
    returned model never does worse than it on the validation set.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    cfg = cfg or EsConfig(step_size=0.05, perturbation_std=0.3, num_perturbations=8, rollouts_per_perturbation=1,
                          keep_fraction=0.5)
    F, yf, yb = train
    val = validation or train
    w = StyleModel.HEURISTIC.copy()

    def fitness(p):
        z = np.clip(F @ p, -50, 50)
        prob = 1.0 / (1.0 + np.exp(-z))
        return float(np.mean(prob * yf + (1 - prob) * yb))

    best_w, best = w.copy(), style_land_rate(w, *val)
    for _ in range(iterations):
        w, _ = es_step_info(w, fitness, cfg, rng)
        s = style_land_rate(w, *val)
        if s > best:
            best_w, best = w.copy(), s
    return StyleModel(best_w, env=env)


# ------------------------------------------------------------------ shortlist and decision


@dataclass
class ShortlistEntry:
    skill_id: int
    R: float
    source: str


@dataclass
class StrategyShortlist:
    entries: list
    fallback: bool = False


HEURISTICS = ("random", "velocity", "distance", "weak_side", "overall")


@dataclass(frozen=True)
class HlcConfig:
    alpha: float = 0.1
    m: int = 3
    n: int = 5
    land_rate_threshold: float = 0.8
    overall_hit_rate_threshold: float = 0.75
    r_scale: float = 1.0
    query_k: int = 25
    update_k: int = 25
    refresh_each_shot: bool = False
    heuristics: tuple = HEURISTICS

    @classmethod
    def from_config(cls, cfg):
        h = cfg["hlc"]
        return cls(h["alpha"], h["shortlist_m"], h["shortlist_n"], h["land_rate_threshold"],
                   h["overall_hit_rate_threshold"], h["r_scale"], h["query_k"], h["update_k"], h["refresh_each_shot"])


def _rank(ids, key):
    """ids sorted by key descending, ties by lower id."""
    return sorted(ids, key=lambda i: (-key[i], i))


def strategy_shortlist(ball, style, tables, opp, specs, cfg=HlcConfig(), rng=None, metrics=None):
    """One (skill, R, source) entry per active heuristic for a rally ball."""
    rng = rng if rng is not None else np.random.default_rng(0)
    cands = [s.id for s in specs if s.style == style and not s.is_serve_receiver and s.id in tables]
    if metrics is None:
        metrics = {sid: query(tables[sid], ball, cfg.query_k) for sid in cands}
    if not cands:
        gen = [s.id for s in specs if not s.is_serve_receiver and s.id in tables]
        if not gen:
            raise PreconditionError("no rally skill has a descriptor table")
        metrics = {sid: query(tables[sid], ball, cfg.query_k) for sid in gen}
        best = _rank(gen, {i: metrics[i].land_rate for i in gen})[0]
        return StrategyShortlist([ShortlistEntry(best, metrics[best].land_rate, "fallback")], fallback=True)
    land = {i: metrics[i].land_rate for i in cands}
    top_n = _rank(cands, land)[: cfg.n]
    pos = np.asarray(ball.position if hasattr(ball, "position") else ball[:3], dtype=float)
    far = {i: float(np.hypot(*(metrics[i].landing_mean - pos[:2]))) for i in top_n}
    speed = {i: abs(metrics[i].hit_velocity_y) for i in top_n}
    entries = []
    for h in cfg.heuristics:
        if h == "random":
            good = [i for i in cands if land[i] > cfg.land_rate_threshold]
            sid = good[int(rng.integers(len(good)))] if good else top_n[0]
        elif h == "velocity":
            top_m = _rank(top_n, speed)[: cfg.m]
            sid = top_m[int(rng.integers(len(top_m)))]
        elif h == "distance":
            top_m = _rank(top_n, far)[: cfg.m]
            sid = top_m[int(rng.integers(len(top_m)))]
        elif h == "weak_side":
            weak = opp.weak_side() if opp is not None else None
            if weak is None:
                sid = top_n[0]
            else:
                toward = {i: (-1.0 if weak == FOREHAND else 1.0) * metrics[i].landing_mean[0] for i in top_n}
                sid = _rank(top_n, toward)[0]
        elif h == "overall":
            strong = opp is not None and opp.hit_rate() > cfg.overall_hit_rate_threshold
            sid = _rank(top_n, far)[0] if strong else top_n[0]
        else:
            raise PreconditionError(f"unknown heuristic {h!r}")
        entries.append(ShortlistEntry(sid, land[sid], h))
    return StrategyShortlist(entries)


def serve_skill(specs, style, spin):
    kind = UNDERSPIN_SERVE if spin == UNDERSPIN else TOPSPIN_SERVE
    for s in specs:
        if s.is_serve_receiver and s.style == style and s.kind == kind:
            return s.id
    raise PreconditionError(f"no serve receiver for {style}/{spin}")


@dataclass
class Decision:
    skill_id: int
    style: str
    is_serve: bool
    spin: str = None
    shortlist: StrategyShortlist = None
    probabilities: list = None


def hlc_act(ball, is_serve, style_model, spin_label, specs, tables, prefs, rng, opp=None, cfg=HlcConfig()):
    """Pick the skill for one opponent hit.

    Serves map (style, classified spin) to a receiver. Rallies build the shortlist,
    add each entry's land rate to its preference and sample from the softmax.
    """
    style = style_model.select(ball)
    if is_serve:
        return Decision(serve_skill(specs, style, spin_label or TOPSPIN), style, True, spin_label or TOPSPIN)
    sl = strategy_shortlist(ball, style, tables, opp, specs, cfg, rng)
    h_hat = [prefs.H[e.skill_id] + cfg.r_scale * e.R for e in sl.entries]
    p = softmax(h_hat)
    k = sample_index(p, rng)
    return Decision(sl.entries[k].skill_id, style, False, None, sl, p)


class HighLevelController:
    """Bundles models, tables and per-opponent state; counts decisions for the one-per-hit check."""

    def __init__(self, specs, tables, style_model, spin_classifier=None, prefs=None, opp=None, cfg=HlcConfig()):
        self.specs = list(specs)
        self.tables = tables
        self.style_model = style_model
        self.spin_classifier = spin_classifier
        self.cfg = cfg
        self.prefs = prefs or PreferenceState.fresh(max(s.id for s in self.specs) + 1, cfg.alpha)
        self.opp = opp or OpponentStats()
        self.decisions = 0

    def classify_serve(self, motion_rows):
        if self.spin_classifier is None or motion_rows is None:
            return TOPSPIN
        return label_serve(motion_rows, self.spin_classifier)

    def act(self, ball, is_serve, rng, serve_motion=None):
        self.decisions += 1
        spin = self.classify_serve(serve_motion) if is_serve else None
        return hlc_act(ball, is_serve, self.style_model, spin, self.specs, self.tables, self.prefs, rng, self.opp,
                       self.cfg)

    def learn(self, batch):
        return update_preferences(batch, self.prefs, self.cfg.refresh_each_shot)


def generalist_pair(skills, preset=TOPSPIN):
    """Forehand and backhand rally generalists with the given spin preset."""
    fh = bh = None
    for sk in skills:
        s = sk.spec
        if s.kind == GENERALIST and not s.is_serve_receiver and s.spin_preset == preset and s.hit_plane_y == -1.6:
            if s.style == FOREHAND and fh is None:
                fh = sk
            elif s.style == BACKHAND and bh is None:
                bh = sk
    if fh is None or bh is None:
        raise PreconditionError("roster lacks a forehand/backhand generalist pair")
    return fh, bh
