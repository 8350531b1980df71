import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import ttagent.matchsim as M
from ttagent.ballistics import BallState, ContactParams
from ttagent.errors import InvalidStateError, MatchOverError, PreconditionError
from ttagent.matchsim import (
    ALTERNATING,
    HUMAN,
    MAIN,
    MISSED,
    RALLY,
    ROBOT,
    SERVE,
    LatencyModel,
    MatchState,
    OpponentContext,
    OpponentProfile,
    RandomizationRanges,
    ablate_decision_timing,
    check_log,
    default_profiles,
    draw_serve,
    format_rows,
    game_over,
    never_returns_profile,
    opponent_shot,
    replay_preferences,
    return_probability,
    run_match,
    score_point,
    tournament,
)
from ttagent.skills import SkillEnv

from fakes import FakePhysics, split_points


def play(m, winners):
    for w in winners:
        m = score_point(m, w)
    return m


def tied(n):
    m = MatchState()
    for _ in range(n):
        m = score_point(score_point(m, HUMAN), ROBOT)
    return m


def test_deuce_continues():
    m = score_point(tied(10), ROBOT)
    assert (m.points[HUMAN], m.points[ROBOT]) == (10, 11) and m.game_index == 0


def test_two_point_margin_ends_game():
    m = score_point(score_point(tied(10), ROBOT), ROBOT)
    assert m.game_scores == [(10, 12)] and m.game_index == 1


def test_twenty_point_cap():
    m = score_point(tied(19), ROBOT)
    assert m.game_scores == [(19, 20)] and m.games[ROBOT] == 1


def test_eleven_nine():
    m = play(MatchState(), [HUMAN] * 9 + [ROBOT] * 11)
    assert m.game_scores == [(9, 11)] and m.games[ROBOT] == 1


def test_scoring_after_match_end():
    m = play(MatchState(), [ROBOT] * 33)
    assert m.finished
    with pytest.raises(MatchOverError):
        score_point(m, ROBOT)
    with pytest.raises(MatchOverError):
        M.call_let(m)


def test_alternating_serve_parity():
    m = MatchState(rule_variant=ALTERNATING)
    sides = []
    for i in range(12):
        sides.append(m.serving_side)
        m = score_point(m, ROBOT if i % 3 else HUMAN)
    assert sides == [HUMAN, HUMAN, ROBOT, ROBOT] * 3


def test_unknown_variant():
    with pytest.raises(PreconditionError):
        MatchState(rule_variant="casual")


@given(st.integers(0, 30), st.integers(0, 30))
def test_game_over_rule(h, r):
    assert game_over(h, r) == (max(h, r) >= 20 or (max(h, r) >= 11 and abs(h - r) >= 2))


def test_latency_defaults_and_clamping():
    lat = LatencyModel()
    assert lat.ball_obs == (40.0, 8.2)
    rng = np.random.default_rng(0)
    assert all(v >= 0 for _ in range(200) for v in LatencyModel((0.1, 100.0), (0.1, 100.0), (0.1, 100.0)).sample(rng).values())
    env = lat.apply(SkillEnv(), rng)
    assert env.ball_delay_ticks == 2


def test_randomization_ranges():
    rr = RandomizationRanges()
    rng = np.random.default_rng(0)
    for _ in range(500):
        o = rr.sample(rng)
        for k, v in o.items():
            lo, hi = getattr(rr, k)
            assert lo <= v <= hi
        c = rr.apply(ContactParams(), o)
        assert 0 <= c.table_restitution_normal <= 1 and c.paddle_friction >= 0 and c.table_friction >= 0


def test_profile_validation():
    with pytest.raises(PreconditionError):
        OpponentProfile("x", return_max=1.5)
    with pytest.raises(PreconditionError):
        OpponentProfile("x", tier="Pro")


def test_beginner_underspin_serve_rate():
    prof = default_profiles()["Beginner"]
    assert prof.serve_underspin_fraction == 0.1
    rng = np.random.default_rng(0)
    rate = np.mean([draw_serve(prof, rng).underspin for _ in range(10_000)])
    assert abs(rate - 0.10) <= 0.02


def test_serve_draws_respect_the_mixture():
    prof = default_profiles()["Intermediate"]
    rng = np.random.default_rng(1)
    for _ in range(20):
        ball = opponent_shot(prof, OpponentContext(SERVE), rng)
        assert isinstance(ball, BallState) and ball.velocity[1] < 0


def test_return_probability_peak_and_reach():
    prof = OpponentProfile("p", weak_side=None)
    assert return_probability(prof, prof.position, 2.0) == prof.return_max
    far = (prof.position[0] + prof.reach_radius + 0.01, prof.position[1])
    assert return_probability(prof, far, 2.0) == 0.0
    rng = np.random.default_rng(0)
    ctx = OpponentContext(RALLY, 0, far, 2.0)
    assert all(opponent_shot(prof, ctx, rng) is MISSED for _ in range(100))


@given(st.floats(-0.8, 0.8), st.floats(0.0, 1.4), st.floats(0, 15))
def test_return_probability_in_unit_interval(x, y, speed):
    for prof in default_profiles().values():
        assert 0.0 <= return_probability(prof, (x, y), speed) <= 1.0


def test_return_probability_decreases_with_speed_and_distance():
    prof = OpponentProfile("p")
    base = return_probability(prof, prof.position, 3.0)
    assert return_probability(prof, prof.position, 8.0) < base
    assert return_probability(prof, (prof.position[0] + 0.5, prof.position[1]), 3.0) < base


# ---------------------------------------------------------------- matches on the real stack


@pytest.fixture(scope="module")
def wall_report(stack):
    log = []
    rep = run_match(stack, never_returns_profile(), np.random.default_rng(0), log=log)
    return rep, log


def test_never_returning_opponent(wall_report):
    rep, _ = wall_report
    assert rep.game_scores == [[0, 11]] * 3
    assert rep.games_won == {HUMAN: 0, ROBOT: 3}
    assert rep.points_won[ROBOT] == 33


def test_one_decision_per_opponent_hit(wall_report):
    rep, log = wall_report
    assert check_log(log)
    assert rep.decisions == rep.opponent_hits


def test_paddle_reset_at_every_hit(wall_report, stack):
    _, log = wall_report
    home = list(stack.env.home_position) + list(stack.env.home_normal)
    assert all(r["paddle_pose"] == home for r in log if r["type"] == "opponent_hit")


def test_check_log_catches_missing_decision():
    log = [{"type": "opponent_hit", "index": 1}]
    with pytest.raises(InvalidStateError):
        check_log(log)


@pytest.fixture(scope="module")
def intermediate_pair(stack):
    prof = default_profiles()["Intermediate"]
    a_log, b_log = [], []
    a = run_match(stack, prof, np.random.default_rng(5), log=a_log)
    b = run_match(stack, prof, np.random.default_rng(5), log=b_log)
    return a, b, a_log


def test_matches_are_deterministic(intermediate_pair):
    a, b, _ = intermediate_pair
    assert a.to_json() == b.to_json()


def test_preferences_replay_from_shot_log(intermediate_pair, stack):
    a, _, _ = intermediate_pair
    replayed = replay_preferences(a.shots, stack.n_skills(), stack.hlc.alpha)
    assert replayed.H == a.h_by_game[-1]


def test_points_are_conserved(intermediate_pair):
    a, _, log = intermediate_pair
    starts = sum(r["type"] == "point_start" for r in log)
    ends = sum(r["type"] == "point_end" for r in log)
    lets = sum(r["type"] == "let" for r in log)
    assert starts == ends + lets
    assert ends == sum(a.points_won.values())
    assert len(a.game_scores) == 3


def test_report_shape(intermediate_pair):
    a, _, _ = intermediate_pair
    assert len(a.h_by_game) == 4 and len(a.h_change) == 3
    assert set(a.heuristic_usage) <= {"random", "velocity", "distance", "weak_side", "overall", "fallback"}
    for v in a.return_rates.values():
        assert math.isnan(v) or 0 <= v <= 1


def test_tournament_rows(stack):
    rows = tournament(stack, {"wall": never_returns_profile()}, 1)
    assert rows[0]["match_win_pct"] == 100.0 and rows[0]["point_win_pct"] == 100.0


def test_ablation_rows_and_late_limit(stack):
    from ttagent.dataset import synth_incoming

    rng = np.random.default_rng(0)
    balls = [synth_incoming(rng) for _ in range(6)]
    rows = ablate_decision_timing(stack, balls, wait_steps=(1, 60))
    assert [r["setting"] for r in rows] == ["wait_1", "wait_60", "decisive", "redecide"]
    assert rows[1]["land"] == 0.0
    for r in rows:
        assert r["hit"] + r["miss"] == pytest.approx(1.0)
    assert rows[0]["reference_land"] == 0.39
    text = format_rows(rows, ["setting", "hit", "land", "miss"])
    assert text.splitlines()[0] == "setting\thit\tland\tmiss"


# ---------------------------------------------------------------- rules through the point loop


@pytest.fixture
def fake_physics(monkeypatch):
    fp = FakePhysics()
    monkeypatch.setattr(M, "execute_shot", fp.shot)
    monkeypatch.setattr(M, "opponent_shot", fp.opponent)
    return fp


@pytest.mark.parametrize("variant", [MAIN, ALTERNATING])
def test_serve_rule_through_point_loop(stack, fake_physics, variant):
    random_stack = replace(stack, selection=M.RANDOM_SELECT)
    log = []
    runner = M.MatchRunner(random_stack, default_profiles()["Intermediate"], np.random.default_rng(1), variant,
                           log=log)
    for _ in range(300):
        if runner.match.finished:
            break
        runner.play_point()
    total = 0
    for pt in split_points(log):
        first_shot = next(r for r in pt if r["type"] == "robot_shot")
        end = pt[-1]
        side = pt[0]["serving"]
        assert side == (HUMAN if variant == MAIN or (total // 2) % 2 == 0 else ROBOT)
        if first_shot["outcome"] != "land" and not first_shot["high_ball"]:
            if variant == MAIN or side == ROBOT:
                assert end["type"] == "let"
            else:
                assert end["type"] == "point_end" and end["winner"] == HUMAN
        if end["type"] == "point_end":
            total += 1
