"""Match simulation: scripted opponents, scoring rules, sub-episode rallies and adaptation bookkeeping."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from .ballistics import BACKHAND, FOREHAND, TOPSPIN, UNDERSPIN, spin_class
from .dataset import synth_incoming
from .errors import InvalidStateError, MatchOverError, PreconditionError, SamplingExhaustedError
from .hlc import (
    Decision,
    HlcConfig,
    OpponentStats,
    PreferenceState,
    StyleModel,
    adaptation_report,
    hlc_act,
    label_serve,
    synth_serve_motion,
    update_preferences,
)
from .skills import TICK, SkillEnv, _observe, execute_shot

MAIN = "main"
ALTERNATING = "alternating"
VARIANTS = (MAIN, ALTERNATING)
HUMAN = "human"
ROBOT = "robot"
SERVE, RALLY, DEAD = "serve", "rally", "dead"

GAME_POINTS = 11
GAME_MARGIN = 2
GAME_CAP = 20

# ------------------------------------------------------------------ rules


@dataclass
class MatchState:
    points: dict = field(default_factory=lambda: {HUMAN: 0, ROBOT: 0})
    games: dict = field(default_factory=lambda: {HUMAN: 0, ROBOT: 0})
    game_index: int = 0
    phase: str = SERVE
    rule_variant: str = MAIN
    let_count: int = 0
    total_points: int = 0
    games_total: int = 3
    game_scores: list = field(default_factory=list)

    def __post_init__(self):
        if self.rule_variant not in VARIANTS:
            raise PreconditionError(f"unknown rule variant {self.rule_variant!r}")

    @property
    def finished(self):
        return self.game_index >= self.games_total

    @property
    def serving_side(self):
        """Who serves the next point. The opponent always physically serves."""
        if self.rule_variant == MAIN:
            return HUMAN
        return HUMAN if (self.total_points // 2) % 2 == 0 else ROBOT

    @property
    def serve_scoring_suspended(self):
        """True when a serve the robot fails to return is replayed instead of scored."""
        return self.rule_variant == MAIN or self.serving_side == ROBOT

    def copy(self):
        return replace(self, points=dict(self.points), games=dict(self.games), game_scores=list(self.game_scores))


def game_over(h, r):
    hi, lo = max(h, r), min(h, r)
    return hi >= GAME_CAP or (hi >= GAME_POINTS and hi - lo >= GAME_MARGIN)


def score_point(match, winner):
    """New state with one point to ``winner``; closes the game and possibly the match."""
    if match.finished:
        raise MatchOverError("match is over")
    if winner not in (HUMAN, ROBOT):
        raise PreconditionError(f"unknown player {winner!r}")
    m = match.copy()
    m.points[winner] += 1
    m.total_points += 1
    m.phase = SERVE
    h, r = m.points[HUMAN], m.points[ROBOT]
    if game_over(h, r):
        m.games[HUMAN if h > r else ROBOT] += 1
        m.game_scores.append((h, r))
        m.points = {HUMAN: 0, ROBOT: 0}
        m.game_index += 1
        m.phase = DEAD if m.finished else SERVE
    return m


def call_let(match):
    if match.finished:
        raise MatchOverError("match is over")
    m = match.copy()
    m.let_count += 1
    m.phase = SERVE
    return m


# ------------------------------------------------------------------ noise models


@dataclass(frozen=True)
class LatencyModel:
    """Per-channel Gaussian delays in ms as (mean, variance)."""

    ball_obs: tuple = (40.0, 8.2)
    paddle_obs: tuple = (31.0, 2.0)
    action: tuple = (71.0, 5.0)

    @classmethod
    def from_config(cls, cfg):
        lat = cfg["latency_ms"]
        return cls(tuple(lat["ball_obs"]), tuple(lat["paddle_obs"]), tuple(lat["action"]))

    def sample(self, rng):
        out = {}
        for name in ("ball_obs", "paddle_obs", "action"):
            mean, var = getattr(self, name)
            out[name] = max(0.0, float(rng.normal(mean, math.sqrt(var))))
        return out

    def apply(self, env, rng):
        """Copy of ``env`` with sampled delays rounded to control ticks."""
        d = self.sample(rng)
        return replace(env, ball_delay_ticks=int(round(d["ball_obs"] / 1000.0 / TICK)),
                       action_delay_ticks=int(round(d["action"] / 1000.0 / TICK)))


@dataclass(frozen=True)
class RandomizationRanges:
    """Uniform offsets to nominal contact parameters; damping maps linearly onto restitution."""

    table_damping: tuple = (-1.0, 5.0)
    paddle_damping: tuple = (-5.0, -1.0)
    paddle_friction: tuple = (-0.29, 0.29)
    table_friction: tuple = (-0.05, 0.05)
    restitution_per_damping: float = -0.01

    @classmethod
    def from_config(cls, cfg):
        r = cfg["randomization"]
        return cls(tuple(r["table_damping"]), tuple(r["paddle_damping"]), tuple(r["paddle_friction"]),
                   tuple(r["table_friction"]), r["restitution_per_damping"])

    def sample(self, rng):
        return {k: float(rng.uniform(*getattr(self, k)))
                for k in ("table_damping", "paddle_damping", "paddle_friction", "table_friction")}

    def apply(self, contact, offsets):
        k = self.restitution_per_damping

        def unit(x):
            return min(max(x, 0.0), 1.0)

        return replace(
            contact,
            table_restitution_normal=unit(contact.table_restitution_normal + k * offsets["table_damping"]),
            paddle_restitution_topspin=unit(contact.paddle_restitution_topspin + k * offsets["paddle_damping"]),
            paddle_restitution_underspin=unit(contact.paddle_restitution_underspin + k * offsets["paddle_damping"]),
            paddle_friction=max(0.0, contact.paddle_friction + offsets["paddle_friction"]),
            table_friction=max(0.0, contact.table_friction + offsets["table_friction"]),
        )


# ------------------------------------------------------------------ opponents

BEGINNER, INTERMEDIATE, ADVANCED, ADVANCED_PLUS = "Beginner", "Intermediate", "Advanced", "AdvancedPlus"
TIERS = (BEGINNER, INTERMEDIATE, ADVANCED, ADVANCED_PLUS)


@dataclass(frozen=True)
class OpponentProfile:
    """A scripted stand-in for a human opponent.

    The return probability is ``return_max`` for slow balls landing at
    ``position``, falls off with landing speed above ``speed_ref`` and with
    squared distance, is scaled down on ``weak_side`` and is zero beyond
    ``reach_radius``. From game ``exploit_after_game`` on, rally shots switch
    to the exploit spin and speed ranges.
    """

    id: str
    tier: str = INTERMEDIATE
    serve_underspin_fraction: float = 0.3
    serve_speed: tuple = (3.0, 5.5)
    serve_topspin: tuple = (-10.0, 60.0)
    serve_underspin: tuple = (-110.0, -40.0)
    underspin_serve_speed: tuple = (2.5, 4.0)
    serve_disguise: float = 0.25
    rally_speed: tuple = (3.5, 7.0)
    rally_spin: tuple = (-20.0, 110.0)
    return_max: float = 0.75
    speed_ref: float = 4.0
    speed_scale: float = 3.0
    distance_penalty: float = 0.5
    reach_radius: float = 1.1
    position: tuple = (0.0, 0.9)
    weak_side: str = None
    weak_penalty: float = 0.0
    exploit_after_game: int = None
    exploit_spin: tuple = (-130.0, -90.0)
    exploit_speed: tuple = (2.5, 3.8)

    def __post_init__(self):
        for name in ("serve_underspin_fraction", "serve_disguise", "return_max", "weak_penalty", "distance_penalty"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise PreconditionError(f"{name} must lie in [0, 1] (got {v})")
        if self.tier not in TIERS:
            raise PreconditionError(f"unknown tier {self.tier!r}")
        if self.weak_side not in (None, FOREHAND, BACKHAND):
            raise PreconditionError(f"weak side must be forehand or backhand (got {self.weak_side!r})")

    def exploiting(self, game_index):
        return self.exploit_after_game is not None and game_index >= self.exploit_after_game


def default_profiles():
    return {
        BEGINNER: OpponentProfile("beginner", BEGINNER, 0.1, (2.5, 4.5), serve_disguise=0.1, rally_speed=(3.0, 5.5),
                                  rally_spin=(-10.0, 70.0), return_max=0.55, speed_ref=3.5, speed_scale=2.0,
                                  reach_radius=0.9, weak_side=BACKHAND, weak_penalty=0.3),
        INTERMEDIATE: OpponentProfile("intermediate", INTERMEDIATE, 0.3, weak_side=BACKHAND, weak_penalty=0.15),
        ADVANCED: OpponentProfile("advanced", ADVANCED, 0.4, (3.5, 6.0), serve_disguise=0.35, rally_speed=(4.0, 8.0),
                                  rally_spin=(-40.0, 130.0), return_max=0.88, speed_ref=5.0, speed_scale=4.0,
                                  reach_radius=1.3, weak_side=FOREHAND, weak_penalty=0.1),
        ADVANCED_PLUS: OpponentProfile("advanced_plus", ADVANCED_PLUS, 0.5, (3.5, 6.5), serve_disguise=0.45,
                                       rally_speed=(4.5, 9.0), rally_spin=(-50.0, 140.0), return_max=0.95,
                                       speed_ref=6.0, speed_scale=5.0, reach_radius=1.5),
    }


def exploit_profile(base=None, after_game=1):
    """Opponent that turns to heavy-underspin pushes from game ``after_game`` (zero-based)."""
    base = base or default_profiles()[INTERMEDIATE]
    return replace(base, id=base.id + "_exploit", exploit_after_game=after_game)


def never_returns_profile():
    return OpponentProfile("wall", BEGINNER, return_max=0.0)


@dataclass
class OpponentContext:
    phase: str
    game_index: int = 0
    landing: tuple = None
    speed: float = 0.0


MISSED = "missed"


@dataclass(frozen=True)
class ServeDraw:
    underspin: bool
    speed: tuple
    spin_x: tuple


def draw_serve(profile, rng):
    """Mixture component of one serve: spin class and the ranges its speed and spin come from."""
    if rng.random() < profile.serve_underspin_fraction:
        return ServeDraw(True, profile.underspin_serve_speed, profile.serve_underspin)
    return ServeDraw(False, profile.serve_speed, profile.serve_topspin)


def return_probability(profile, landing, speed):
    d = math.hypot(landing[0] - profile.position[0], landing[1] - profile.position[1])
    if d > profile.reach_radius:
        return 0.0
    p = profile.return_max * (1.0 - profile.distance_penalty * (d / profile.reach_radius) ** 2)
    if speed > profile.speed_ref:
        p *= math.exp(-(speed - profile.speed_ref) / profile.speed_scale)
    if profile.weak_side is not None:
        side = FOREHAND if landing[0] < 0 else BACKHAND
        if side == profile.weak_side:
            p *= 1.0 - profile.weak_penalty
    return min(max(p, 0.0), 1.0)


def _synth(rng, kind, spin_x, speed, attempts=5):
    for _ in range(attempts):
        try:
            return synth_incoming(rng, kind, spin_x=spin_x, speed=speed)
        except SamplingExhaustedError:
            continue
    return None


def opponent_shot(profile, context, rng):
    """Serve or rally return as a BallState, or MISSED. Serves come with the paddle motion as ``.motion``."""
    if context.phase == SERVE:
        d = draw_serve(profile, rng)
        ball = _synth(rng, "serve", d.spin_x, d.speed)
        if ball is None:
            raise SamplingExhaustedError("profile serve ranges produce no valid serve")
        return ball
    if context.landing is None or rng.random() >= return_probability(profile, context.landing, context.speed):
        return MISSED
    if profile.exploiting(context.game_index):
        ball = _synth(rng, "rally", profile.exploit_spin, profile.exploit_speed)
    else:
        ball = _synth(rng, "rally", profile.rally_spin, profile.rally_speed)
    return MISSED if ball is None else ball


# ------------------------------------------------------------------ robot stack

HLC_SELECT = "hlc"
RANDOM_SELECT = "random"


@dataclass
class RobotStack:
    skills: list
    tables: dict
    style_model: StyleModel = None
    spin_classifier: object = None
    env: SkillEnv = field(default_factory=SkillEnv)
    hlc: HlcConfig = field(default_factory=HlcConfig)
    latency: LatencyModel = None
    selection: str = HLC_SELECT
    decide_tick: int = 1

    def __post_init__(self):
        if self.style_model is None:
            self.style_model = StyleModel.heuristic(self.env)
        if self.selection not in (HLC_SELECT, RANDOM_SELECT):
            raise PreconditionError(f"unknown selection mode {self.selection!r}")
        self.by_id = {s.spec.id: s for s in self.skills}

    @property
    def specs(self):
        return [s.spec for s in self.skills]

    def n_skills(self):
        return max(self.by_id) + 1


def observe_initial(ball, env, rng):
    """Perception estimate of a freshly hit ball: noisy position and velocity, spin unknown."""
    s = ball.to_array().copy()
    s[0:3] += rng.normal(0.0, env.obs_noise_position, 3)
    s[3:6] += rng.normal(0.0, env.obs_noise_velocity, 3)
    s[6:9] = 0.0
    return s


def _random_decision(stack, is_serve, rng):
    pool = [s.id for s in stack.specs if s.is_serve_receiver == is_serve]
    sid = pool[int(rng.integers(len(pool)))]
    return Decision(sid, stack.by_id[sid].spec.style, is_serve)


def _serve_spin_label(stack, motion):
    if stack.spin_classifier is None or motion is None:
        return TOPSPIN
    return label_serve(motion, stack.spin_classifier)


# ------------------------------------------------------------------ points and matches


class MatchRunner:
    """Single-threaded owner of one match's mutable state."""

    def __init__(self, stack, profile, rng, variant=MAIN, prefs=None, opp=None, cfg=None, log=None):
        self.stack = stack
        self.profile = profile
        self.rng = rng
        cfg = cfg or {}
        mcfg = cfg.get("match", {}) if isinstance(cfg, dict) else {}
        self.max_lets = int(mcfg.get("max_lets_per_point", 20))
        self.stop_probability = float(mcfg.get("protective_stop_probability", 0.0))
        self.match = MatchState(rule_variant=variant, games_total=int(mcfg.get("games", 3)))
        self.prefs = prefs or PreferenceState.fresh(stack.n_skills(), stack.hlc.alpha)
        self.opp = opp or OpponentStats()
        self.log = log if log is not None else []
        self.clock = 0.0
        self.opponent_hits = 0
        self.decisions = 0
        self.shots = []
        self.heuristic_usage = Counter()
        self.spin_returns = {}
        self.h_by_game = [list(self.prefs.H)]

    def emit(self, kind, **kw):
        rec = {"type": kind, "t": round(self.clock, 6), "game": self.match.game_index, **kw}
        self.log.append(rec)
        return rec

    def decide(self, ball, is_serve, motion, rng):
        self.decisions += 1
        st = self.stack
        if st.selection == RANDOM_SELECT:
            return _random_decision(st, is_serve, rng)
        obs = observe_initial(ball, st.env, rng)
        spin = _serve_spin_label(st, motion) if is_serve else None
        return hlc_act(obs, is_serve, st.style_model, spin, st.specs, st.tables, self.prefs, rng, self.opp, st.hlc)

    def robot_turn(self, ball, is_serve, motion):
        """One sub-episode: opponent hit, decision one tick later, execution and bookkeeping."""
        st = self.stack
        rng = self.rng
        self.opponent_hits += 1
        home_p, home_n = st.env.home
        self.emit("opponent_hit", index=self.opponent_hits, serve=is_serve, ball=ball.to_array().tolist(),
                  paddle_pose=home_p.tolist() + home_n.tolist())
        self.clock += st.decide_tick * TICK
        d = self.decide(ball, is_serve, motion, rng)
        entry = None
        if d.shortlist is not None:
            entry = next(e.source for e in d.shortlist.entries if e.skill_id == d.skill_id)
            self.heuristic_usage[entry] += 1
        self.emit("decision", index=self.decisions, skill=d.skill_id, style=d.style, spin=d.spin, heuristic=entry)
        env = st.latency.apply(st.env, rng) if st.latency is not None else st.env
        res = execute_shot(st.by_id[d.skill_id], ball, env, rng, decide_tick=st.decide_tick)
        self.clock += res.contact_time or 0.5
        bucket = spin_class(ball)
        acc = self.spin_returns.setdefault(bucket, [0, 0])
        acc[0] += res.landed and not res.high_ball
        acc[1] += 1
        self.emit("robot_shot", skill=d.skill_id, outcome=res.outcome, high_ball=bool(res.high_ball),
                  landing=None if res.landing is None else [float(x) for x in res.landing],
                  hit_velocity_y=None if math.isnan(res.hit_velocity_y) else res.hit_velocity_y)
        return d, res

    def play_point(self):
        """Resolve one point, replaying lets. Returns the winner, or None when the let guard gives up."""
        if self.match.finished:
            raise MatchOverError("match is over")
        lets = 0
        while True:
            self.emit("point_start", serving=self.match.serving_side, score=[self.match.points[HUMAN],
                                                                             self.match.points[ROBOT]])
            if self.stop_probability and self.rng.random() < self.stop_probability:
                outcome = "protective_stop"
            else:
                outcome = self._rally()
            if outcome in (HUMAN, ROBOT):
                return self._score(outcome)
            self.match = call_let(self.match)
            self.emit("let", reason=outcome)
            lets += 1
            if lets >= self.max_lets:
                # a point that cannot be completed goes to the physical server
                return self._score(HUMAN, let_guard=True)

    def _score(self, winner, **kw):
        game = self.match.game_index
        self.match = score_point(self.match, winner)
        self.emit("point_end", winner=winner, **kw)
        if self.match.game_index != game:
            self.h_by_game.append(list(self.prefs.H))
            self.emit("game_end", score=list(self.match.game_scores[-1]))
        return winner

    def _rally(self):
        ctx = OpponentContext(SERVE, self.match.game_index)
        ball = opponent_shot(self.profile, ctx, self.rng)
        motion = synth_serve_motion(self.rng, spin_class(ball) == UNDERSPIN, ambiguity=self.profile.serve_disguise)
        is_serve = True
        self.match.phase = SERVE
        while True:
            d, res = self.robot_turn(ball, is_serve, motion)
            if res.high_ball:
                return "high_ball"
            reward = 1.0 if res.landed else 0.0
            update = [(d.skill_id, reward)]
            update_preferences(update, self.prefs, self.stack.hlc.refresh_each_shot)
            self.shots.append((d.skill_id, reward))
            if not res.landed:
                if is_serve and self.match.serve_scoring_suspended:
                    return "serve_not_returned"
                return HUMAN
            speed = float(np.linalg.norm(res.outgoing[3:6]))
            nxt = opponent_shot(self.profile, OpponentContext(RALLY, self.match.game_index, tuple(res.landing), speed),
                                self.rng)
            returned = nxt is not MISSED
            self.opp.record(float(res.landing[0]), returned)
            self.emit("opponent_return" if returned else "opponent_miss", landing=[float(x) for x in res.landing])
            if not returned:
                return ROBOT
            ball, motion, is_serve = nxt, None, False
            self.match.phase = RALLY


@dataclass
class MatchReport:
    profile: str
    variant: str
    game_scores: list
    games_won: dict
    points_won: dict
    lets: int
    decisions: int
    opponent_hits: int
    return_rates: dict
    h_by_game: list
    h_change: list
    heuristic_usage: dict
    skill_usage: list
    skill_failures: list
    shots: list

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def _per_game_counts(log, key_fn):
    out = []
    cur = Counter()
    for rec in log:
        if rec["type"] == "robot_shot":
            k = key_fn(rec)
            if k is not None:
                cur[k] += 1
        elif rec["type"] == "game_end":
            out.append(dict(cur))
            cur = Counter()
    if cur:
        out.append(dict(cur))
    return out


def run_match(stack, profile, rng, variant=MAIN, prefs=None, opp=None, cfg=None, log=None, max_points=10_000):
    """Play a full match and summarize it. ``prefs`` and ``opp`` persist across its games."""
    runner = MatchRunner(stack, profile, rng, variant, prefs, opp, cfg, log)
    n = 0
    while not runner.match.finished:
        runner.play_point()
        n += 1
        if n > max_points:
            raise InvalidStateError("match did not terminate")
    return match_report(runner)


def match_report(runner):
    m = runner.match
    names = {s.spec.id: s.spec.name for s in runner.stack.skills}
    changes = [adaptation_report(a, b, names) for a, b in zip(runner.h_by_game, runner.h_by_game[1:])]
    won = {HUMAN: sum(g[0] for g in m.game_scores), ROBOT: sum(g[1] for g in m.game_scores)}
    return MatchReport(
        profile=runner.profile.id,
        variant=m.rule_variant,
        game_scores=[list(g) for g in m.game_scores],
        games_won=dict(m.games),
        points_won=won,
        lets=m.let_count,
        decisions=runner.decisions,
        opponent_hits=runner.opponent_hits,
        return_rates={k: (v[0] / v[1] if v[1] else float("nan")) for k, v in runner.spin_returns.items()},
        h_by_game=runner.h_by_game,
        h_change=changes,
        heuristic_usage=dict(runner.heuristic_usage),
        skill_usage=_per_game_counts(runner.log, lambda r: r["skill"]),
        skill_failures=_per_game_counts(runner.log, lambda r: None if r["outcome"] == "land" else r["skill"]),
        shots=runner.shots,
    )


def most_exploited_skill(report, rally_ids, from_game=1):
    """Rally skill with the most failed returns from game ``from_game`` on; ties to the lower id."""
    fails = Counter()
    for g in report.skill_failures[from_game:]:
        fails.update({k: v for k, v in g.items() if k in rally_ids})
    if not fails:
        return None
    return min(fails, key=lambda k: (-fails[k], k))


def replay_preferences(shots, n_skills, alpha, refresh=False):
    p = PreferenceState.fresh(n_skills, alpha)
    for s in shots:
        update_preferences([tuple(s)], p, refresh)
    return p


def play_points(stack, profile, n_points, rng, variant=MAIN, cfg=None):
    """Robot point wins over ``n_points`` scored points, chaining matches as needed."""
    won = 0
    played = 0
    runner = MatchRunner(stack, profile, rng, variant, cfg=cfg)
    while played < n_points:
        if runner.match.finished:
            runner = MatchRunner(stack, profile, rng, variant, runner.prefs, runner.opp, cfg)
        won += runner.play_point() == ROBOT
        played += 1
    return won, played


def tournament(stack, profiles, n_matches, seed=0, variant=MAIN, cfg=None):
    """Win percentages per profile, each match against a fresh opponent with its own rng stream."""
    rows = []
    for name, prof in profiles.items():
        seqs = np.random.SeedSequence([seed, TIERS.index(prof.tier) if prof.tier in TIERS else 0]).spawn(n_matches)
        mw = gw = gp = pw = pp = 0
        for ss in seqs:
            rep = run_match(stack, prof, np.random.default_rng(ss), variant, cfg=cfg)
            mw += rep.games_won[ROBOT] > rep.games_won[HUMAN]
            gw += rep.games_won[ROBOT]
            gp += rep.games_won[ROBOT] + rep.games_won[HUMAN]
            pw += rep.points_won[ROBOT]
            pp += rep.points_won[ROBOT] + rep.points_won[HUMAN]
        rows.append({"profile": name, "matches": n_matches, "match_win_pct": 100.0 * mw / n_matches,
                     "game_win_pct": 100.0 * gw / max(gp, 1), "point_win_pct": 100.0 * pw / max(pp, 1)})
    return rows


# ------------------------------------------------------------------ ablations

REFERENCE_ROWS = {"wait_1": {"land": 0.39}, "wait_3": {"land": 0.25}, "decisive": {"land": 0.64},
                  "redecide": {"land": 0.56}}


def _decision_at(stack, states_ball, tick, rng, prefs):
    """HLC decision from a noisy delayed observation ``tick`` control steps after the opponent's hit."""
    obs = states_ball(tick, rng)
    return hlc_act(obs, False, stack.style_model, None, stack.specs, stack.tables, prefs, rng, None, stack.hlc)


def _ball_observer(ball, env):
    from .skills import _rollout

    states, n, *_ = _rollout(ball.to_array(), env, 2.5)
    states = states[:n]

    def at(tick, rng):
        s, _ = _observe(states, tick + env.ball_delay_ticks, env.ball_delay_ticks, env, rng)
        return s

    return at


def _rates(results):
    n = max(len(results), 1)
    hit = sum(r.contacted for r in results) / n
    land = sum(r.landed for r in results) / n
    return {"n": len(results), "hit": hit, "land": land, "miss": 1.0 - hit}


def ablate_decision_timing(stack, balls, wait_steps=(1, 3), redecide_every=2, seed=0):
    """Hit/land/miss rates for waiting before deciding and for committing versus re-deciding.

    Every setting plays the same balls with the same per-ball random streams.
    """
    env = stack.env
    n_sk = stack.n_skills()
    rows = []
    observers = [_ball_observer(b, env) for b in balls]

    def run(label, decide_tick, redecide):
        out = []
        for i, b in enumerate(balls):
            drng = np.random.default_rng([seed, i, 1])
            xrng = np.random.default_rng([seed, i, 2])
            prefs = PreferenceState.fresh(n_sk, stack.hlc.alpha)
            d = _decision_at(stack, observers[i], decide_tick, drng, prefs)
            switches = None
            if redecide:
                switches = {}
                horizon = int(1.0 / TICK)
                for k in range(decide_tick + redecide, horizon, redecide):
                    dk = _decision_at(stack, observers[i], k, drng, prefs)
                    switches[k] = stack.by_id[dk.skill_id]
            out.append(execute_shot(stack.by_id[d.skill_id], b, env, xrng, decide_tick=decide_tick,
                                    switches=switches))
        row = {"setting": label, **_rates(out)}
        ref = REFERENCE_ROWS.get(label)
        row["reference_land"] = ref["land"] if ref else None
        rows.append(row)

    for w in wait_steps:
        run(f"wait_{w}", w, None)
    run("decisive", stack.decide_tick, None)
    run("redecide", stack.decide_tick, redecide_every)
    return rows


def format_rows(rows, columns=None):
    columns = columns or list(rows[0])
    lines = ["\t".join(columns)]
    for r in rows:
        lines.append("\t".join(f"{r[c]:.3f}" if isinstance(r[c], float) else str(r[c]) for c in columns))
    return "\n".join(lines)


def write_event_log(log, path):
    with open(path, "w") as fh:
        for rec in log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def check_log(log):
    """Structural checks on an event log: one decision per opponent hit, matching indices, home resets."""
    hits = [r for r in log if r["type"] == "opponent_hit"]
    decs = [r for r in log if r["type"] == "decision"]
    if len(hits) != len(decs):
        raise InvalidStateError(f"{len(hits)} opponent hits but {len(decs)} decisions")
    for h, d in zip(hits, decs):
        if h["index"] != d["index"]:
            raise InvalidStateError(f"decision {d['index']} answers hit {h['index']}")
    return True
