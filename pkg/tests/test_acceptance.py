"""The twelve acceptance criteria, each reporting one PASS/FAIL line."""

import math
import time
from dataclasses import replace

import numpy as np
from scipy.stats import binomtest

import ttagent.hlc as H
import ttagent.matchsim as M
from ttagent.ballistics import (
    BallCategory,
    BallState,
    ContactParams,
    FlightParams,
    aero_forces,
    classify_category,
    simulate_trajectory,
    step_flight,
)
from ttagent.dataset import (
    MISS,
    RETURN,
    category_weights,
    fit_initial_state,
    record_outcome,
    reflect_y,
    sample_initial_state,
    synth_dataset,
    synth_incoming,
    synth_observed,
)
from ttagent.descriptors import DescriptorTable, SkillMetrics, update_with_real
from ttagent.hlc import (
    PreferenceState,
    ShortlistEntry,
    StrategyShortlist,
    StyleModel,
    hlc_act,
    sample_index,
    update_preferences,
)
from ttagent.matchsim import (
    ALTERNATING,
    HUMAN,
    MAIN,
    RANDOM_SELECT,
    ROBOT,
    MatchState,
    call_let,
    check_log,
    default_profiles,
    exploit_profile,
    ablate_decision_timing,
    game_over,
    most_exploited_skill,
    play_points,
    run_match,
    score_point,
)
from ttagent.optimizer import EsConfig, orthogonal_perturbations, run_es
from ttagent.skills import FOREHAND, FilmAdapter, apply_film, build_skills, net_height_reward

from fakes import FakePhysics, split_points

NO_AERO = FlightParams(blunt_drag=0.0, magnus_lift=0.0)
ELASTIC = ContactParams(table_restitution_normal=1.0, table_friction=0.0, paddle_restitution_topspin=1.0,
                        paddle_restitution_underspin=1.0, paddle_friction=0.0)


def test_01_gradient_bandit(acceptance):
    t0 = time.perf_counter()
    p = update_preferences([(0, 1.0), (0, 0.0)], PreferenceState.fresh(2, alpha=0.1))
    exact = p.H == [-0.025, 0.025]
    converged = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        q = PreferenceState.fresh(3)
        probs = (0.8, 0.5, 0.2)
        for _ in range(5000):
            k = sample_index(q.probabilities(), rng)
            update_preferences([(k, float(rng.random() < probs[k]))], q)
        converged += q.probabilities()[0] > 0.8
    dt = time.perf_counter() - t0
    ok = exact and converged >= 95 and dt < 10
    acceptance(1, "gradient bandit", ok, f"H={p.H} converged={converged}/100 time={dt:.1f}s")
    assert ok


def _softmax_frequencies(n=10_000):
    ball = BallState((0.0, 1.5, 0.25), (0.0, -5.0, 1.0), (0.0, 0.0, 0.0))
    specs = [s.spec for s in build_skills()]
    rally = [s.id for s in specs if not s.is_serve_receiver and s.style == FOREHAND][:2]
    entries = StrategyShortlist([ShortlistEntry(rally[0], 0.0, "x"), ShortlistEntry(rally[1], 0.0, "x")])
    orig = H.strategy_shortlist
    H.strategy_shortlist = lambda *a, **k: entries
    try:
        prefs = PreferenceState.fresh(len(specs))
        prefs.H[rally[0]] = 1.0
        rng = np.random.default_rng(0)
        picks = [hlc_act(ball, False, StyleModel(), None, specs, {}, prefs, rng).skill_id for _ in range(n)]
    finally:
        H.strategy_shortlist = orig
    return picks.count(rally[0]) / n, picks.count(rally[1]) / n


def test_02_hlc_inference(acceptance, stack):
    t0 = time.perf_counter()
    f0, f1 = _softmax_frequencies()
    target = (math.e / (math.e + 1), 1 / (math.e + 1))
    freq_ok = abs(f0 - target[0]) <= 0.02 and abs(f1 - target[1]) <= 0.02
    dt = time.perf_counter() - t0
    logs_ok = True
    for seed, prof in enumerate(default_profiles().values()):
        log = []
        rep = run_match(stack, prof, np.random.default_rng(seed), log=log)
        logs_ok &= check_log(log) and rep.decisions == rep.opponent_hits
    ok = freq_ok and logs_ok and dt < 5
    acceptance(2, "HLC inference", ok, f"freq=({f0:.3f}, {f1:.3f}) one-decision-per-hit={logs_ok} time={dt:.1f}s")
    assert ok


def test_03_formula_exactness(acceptance):
    nhr = (net_height_reward(0.173) == 1.0, net_height_reward(0.5) == -1.1,
           abs(net_height_reward(0.25) - math.exp(-0.77)) <= 1e-12)
    a = np.random.default_rng(0).standard_normal(6)
    film = np.array_equal(apply_film(a, FilmAdapter(6, 4), np.ones(4)), a)
    ds = synth_dataset(37, 5, np.random.default_rng(2))
    out = reflect_y(ds)
    counts = len(out.rally()) == 2 * len(ds.rally()) and len(out.serves()) == len(ds.serves())
    ok = all(nhr) and film and counts
    acceptance(3, "formula exactness", ok, f"nhr={nhr} film_identity={film} reflect {len(ds.rally())}->{len(out.rally())}")
    assert ok


def test_04_descriptor_correctness(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    scale = np.array([0.3, 0.2, 0.1, 1.0, 2.0, 0.8])
    n = 10_000
    t = DescriptorTable(0, rng.standard_normal((n, 6)) * scale, rng.random(n), rng.normal(4, 1, n),
                        rng.normal(0, 0.3, (n, 2)), rng.random((n, 2)) * 0.1, np.full(n, 10))
    queries = rng.standard_normal((1000, 6)) * scale
    mismatches = 0
    for k in (1, 5, 25):
        for q in queries:
            idx, _ = t.neighbors(q, k)
            mismatches += not np.array_equal(idx, t.brute_neighbors(q, k))
    oracle = t.land.copy()
    for landed in rng.random(50) < 0.5:
        q = t.keys[int(rng.integers(n))] + rng.normal(0, 0.05, 6)
        for i in t.brute_neighbors(q, 25):
            oracle[i] = (oracle[i] + float(landed)) / 2
        update_with_real(t, q, SkillMetrics.from_outcome(bool(landed)))
    replay = float(np.max(np.abs(t.land - oracle)))
    dt = time.perf_counter() - t0
    ok = mismatches == 0 and replay <= 1e-15 and dt < 30
    acceptance(4, "descriptor correctness", ok, f"mismatches={mismatches} replay_err={replay:.1e} time={dt:.1f}s")
    assert ok


def test_05_physics_invariants(acceptance):
    t0 = time.perf_counter()
    s = BallState((0.0, 1.2, 0.3), (0.5, -6.0, 1.5), (120.0, 20.0, -40.0))
    drag_ok = perp = True
    worst_perp = 0.0
    for _ in range(400):
        drag, magnus = aero_forces(s)
        drag_ok &= float(drag @ s.velocity) <= 0
        denom = np.linalg.norm(magnus) * np.linalg.norm(s.velocity)
        if denom > 0:
            worst_perp = max(worst_perp, abs(float(magnus @ s.velocity)) / denom)
        s = step_flight(s)
    perp = worst_perp <= 1e-9

    b0 = BallState((0.1, -1.0, 0.3), (0.5, 4.0, 2.0), (0, 0, 0))
    b, para = b0, 0.0
    for i in range(1, 301):
        b = step_flight(b, NO_AERO)
        t = i * NO_AERO.dt
        ref = b0.position + b0.velocity * t + 0.5 * np.array([0, 0, -9.81]) * t * t
        para = max(para, float(np.max(np.abs(b.position - ref))))

    tr = simulate_trajectory(BallState((0.1, -0.3, 0.3), (0.1, -0.2, 0.0), (0, 0, 0)), NO_AERO, ELASTIC,
                             horizon=2.0, stop_bounces=100)
    e = 0.5 * np.sum(tr.states[:, 3:6] ** 2, axis=1) + 9.81 * tr.states[:, 2]
    energy = float(np.max(np.abs(e - e[0])) / abs(e[0]))

    c = BallState((0.0, 1.2, 0.4), (0.4, -4.0, 1.5), (80, 10, -20))

    def endpoint(dt):
        r = simulate_trajectory(c, FlightParams(dt=dt), ContactParams(), horizon=0.6)
        k = min(int(round(0.6 / dt)) - 1, len(r.states) - 1)
        return r.states[k, 0:3]

    ref = endpoint(1.25e-5)
    ratio = float(np.linalg.norm(endpoint(0.001) - ref) / np.linalg.norm(endpoint(0.0005) - ref))
    dt = time.perf_counter() - t0
    ok = drag_ok and perp and para <= 1e-9 and energy <= 1e-6 and 1.5 <= ratio <= 2.5 and dt < 10
    acceptance(5, "physics invariants", ok, f"drag_power<=0={drag_ok} perp={worst_perp:.1e} parabola={para:.1e} "
               f"energy={energy:.1e} ratio={ratio:.2f} time={dt:.1f}s")
    assert ok


def test_06_trajectory_fitting(acceptance):
    t0 = time.perf_counter()
    truth = synth_incoming(np.random.default_rng(11))
    est, _ = fit_initial_state(synth_observed(truth, duration=0.3))
    clean = (np.max(np.abs(est.position - truth.position)) <= 1e-3
             and np.max(np.abs(est.velocity - truth.velocity)) <= 1e-2
             and np.max(np.abs(est.spin - truth.spin)) <= 1.0)
    rng = np.random.default_rng(100)
    verr, werr = [], []
    for _ in range(50):
        tr = synth_incoming(rng)
        est, _ = fit_initial_state(synth_observed(tr, duration=0.3, noise=0.005, rng=rng), rng=rng)
        verr.append(np.linalg.norm(est.velocity - tr.velocity) / np.linalg.norm(tr.velocity))
        werr.append(np.linalg.norm(est.spin - tr.spin))
    mv, mw = float(np.median(verr)), float(np.median(werr))
    dt = time.perf_counter() - t0
    ok = clean and mv <= 0.05 and mw <= 15 and dt < 120
    acceptance(6, "trajectory fitting", ok, f"noiseless={clean} median_v_err={mv:.3%} median_spin_err={mw:.1f} "
               f"time={dt:.1f}s")
    assert ok


def test_07_optimizer(acceptance):
    t0 = time.perf_counter()
    dim = 20
    rng = np.random.default_rng(7)
    target = rng.standard_normal(dim)
    d = rng.standard_normal(dim)
    start = target + d / np.linalg.norm(d)
    x, _ = run_es(start, lambda p: -float(np.sum((p - target) ** 2)), EsConfig(), np.random.default_rng(0), 200)
    gap = float(np.sum((x - target) ** 2))
    ortho = 0.0
    for seed in range(20):
        e = orthogonal_perturbations(50, dim, np.random.default_rng(seed))
        for a in range(0, 50, dim):
            blk = e[a:a + dim]
            g = blk @ blk.T
            ortho = max(ortho, float(np.max(np.abs(g - np.diag(np.diag(g))))))
    dt = time.perf_counter() - t0
    ok = gap <= 1e-3 and ortho <= 1e-9 and dt < 60
    acceptance(7, "optimizer", ok, f"start_gap={np.sum((start - target) ** 2):.2f} final_gap={gap:.1e} "
               f"orthogonality={ortho:.1e} time={dt:.1f}s")
    assert ok


def test_08_category_sampling(acceptance):
    ds = synth_dataset(60, 0, np.random.default_rng(4))
    rng = np.random.default_rng(5)
    for r in ds.rally():
        record_outcome(ds, r.id, RETURN if rng.random() < (0.8 if BallCategory.FAST in r.categories else 0.3)
                       else MISS)
    pool = ds.rally()
    cats = [c for c in BallCategory.singles() if any(c in r.categories for r in pool)]
    p_cat = dict(zip(cats, category_weights(ds, cats)))
    p_rec = {r.id: 0.0 for r in pool}
    for c in cats:
        members = [r for r in pool if c in r.categories]
        w = sum(r.weight for r in members)
        for r in members:
            p_rec[r.id] += p_cat[c] * r.weight / w
    target = {c: sum(p_rec[r.id] for r in pool if c in r.categories) for c in cats}
    n = 100_000
    hits = {c: 0 for c in cats}
    for _ in range(n):
        _, rec = sample_initial_state(ds, rng, perturbation_scale=0, return_record=True)
        for c in cats:
            hits[c] += c in rec.categories
    rel = max(abs(hits[c] / n - target[c]) / target[c] for c in cats)
    examples = [
        classify_category(BallState((0, 0, 0.5), (0, 8, 0), (60, 0, 0))) == BallCategory.FAST | BallCategory.TOPSPIN,
        classify_category(BallState((0, 0, 0.5), (0, 4, 0), (0, 0, 0))) == BallCategory.NORMAL | BallCategory.NOSPIN,
        classify_category(BallState((0, 0, 0.5), (0, 3, 3), (-30, 0, 0)))
        == BallCategory.SLOW | BallCategory.UNDERSPIN | BallCategory.LOB,
    ]
    ok = rel <= 0.05 and all(examples)
    acceptance(8, "category sampling", ok, f"max_rel_dev={rel:.3%} over {len(cats)} categories examples={examples}")
    assert ok


def test_09_adaptation(acceptance, stack):
    t0 = time.perf_counter()
    prof = exploit_profile()
    rally_ids = [s.id for s in stack.specs if not s.is_serve_receiver]
    decreased = 0
    for seed in range(100):
        rep = run_match(stack, prof, np.random.default_rng([9, seed]))
        k = most_exploited_skill(rep, rally_ids)
        decreased += k is not None and rep.h_by_game[3][k] < rep.h_by_game[1][k]
    dt = time.perf_counter() - t0
    ok = decreased >= 90 and dt < 300
    acceptance(9, "adaptation", ok, f"H decreased game1->game3 in {decreased}/100 matches time={dt:.0f}s")
    assert ok


def test_10_strategy_value(acceptance, stack):
    t0 = time.perf_counter()
    prof = default_profiles()["Intermediate"]
    hlc_won, n = play_points(stack, prof, 200, np.random.default_rng(10))
    rnd_won, _ = play_points(replace(stack, selection=RANDOM_SELECT), prof, 200, np.random.default_rng(10))
    p = binomtest(hlc_won, n, rnd_won / n, alternative="greater").pvalue if rnd_won < n else 1.0
    dt = time.perf_counter() - t0
    ok = hlc_won > rnd_won and p < 0.05 and dt < 300
    acceptance(10, "strategy value", ok, f"hlc={hlc_won}/{n} random={rnd_won}/{n} p={p:.2e} time={dt:.0f}s")
    assert ok


def test_11_ablation_trends(acceptance, stack):
    # the wait effect is about half a point of land rate, so the corpus must be large
    rng = np.random.default_rng(11)
    balls = [synth_incoming(rng) for _ in range(1500)]
    t0 = time.perf_counter()
    rows = {r["setting"]: r for r in ablate_decision_timing(stack, balls)}
    dt = time.perf_counter() - t0
    w1, w3, dec, red = (rows[k]["land"] for k in ("wait_1", "wait_3", "decisive", "redecide"))
    ok = w1 >= w3 and dec >= red
    acceptance(11, "ablation trends", ok, f"wait_1={w1:.3f} wait_3={w3:.3f} decisive={dec:.3f} redecide={red:.3f} "
               f"(reference 0.39/0.25, 0.64/0.56) n={len(balls)} time={dt:.0f}s")
    assert ok


def _rules_violations(seq_rng, variant):
    """Drive one random point sequence through the rules; count broken invariants."""
    m = MatchState(rule_variant=variant)
    bad = 0
    played = 0
    while not m.finished:
        before = (dict(m.points), dict(m.games), m.game_index, m.total_points)
        expected_side = HUMAN if variant == MAIN else (HUMAN, ROBOT)[(m.total_points // 2) % 2]
        bad += m.serving_side != expected_side
        u = seq_rng.random()
        if u < 0.1:
            m = call_let(m)
            bad += (dict(m.points), dict(m.games), m.game_index, m.total_points) != before
            continue
        winner = ROBOT if u < 0.55 else HUMAN
        m = score_point(m, winner)
        played += 1
        h, r = before[0][HUMAN] + (winner == HUMAN), before[0][ROBOT] + (winner == ROBOT)
        if game_over(h, r):
            done = m.game_scores[-1] == (h, r) and m.points == {HUMAN: 0, ROBOT: 0}
            margin = max(h, r) == 20 or abs(h - r) >= 2
            bad += not (done and margin and max(h, r) >= 11)
        else:
            bad += m.points != {HUMAN: h, ROBOT: r} or m.game_index != before[2]
    bad += len(m.game_scores) != m.games_total or sum(m.games.values()) != m.games_total
    bad += sum(sum(g) for g in m.game_scores) != played
    return bad


def test_12_rules_engine(acceptance, monkeypatch, stack):
    rng = np.random.default_rng(12)
    violations = sum(_rules_violations(rng, (MAIN, ALTERNATING)[i % 2]) for i in range(10_000))

    fp = FakePhysics()
    monkeypatch.setattr(M, "execute_shot", fp.shot)
    monkeypatch.setattr(M, "opponent_shot", fp.opponent)
    serve_bad = 0
    loop_points = 0
    for variant in (MAIN, ALTERNATING):
        log = []
        runner = M.MatchRunner(replace(stack, selection=RANDOM_SELECT), default_profiles()["Intermediate"],
                               np.random.default_rng(13), variant, log=log)
        while loop_points < (5000 if variant == MAIN else 10_000):
            if runner.match.finished:
                runner = M.MatchRunner(runner.stack, runner.profile, runner.rng, variant, runner.prefs, runner.opp,
                                       log=log)
            runner.play_point()
            loop_points += 1
        for pt in split_points(log):
            first = next(r for r in pt if r["type"] == "robot_shot")
            failed = first["outcome"] != "land" and not first["high_ball"]
            robot_receives = variant == MAIN or pt[0]["serving"] == ROBOT
            if failed and robot_receives:
                serve_bad += pt[-1]["type"] != "let"
    ok = violations == 0 and serve_bad == 0
    acceptance(12, "rules engine", ok, f"violations={violations} over 10000 sequences; "
               f"serve-rule violations={serve_bad} over {loop_points} simulated points")
    assert ok
