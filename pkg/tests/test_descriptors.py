from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ttagent.dataset import synth_dataset
from ttagent.descriptors import (
    DescriptorTable,
    SkillMetrics,
    build_descriptor,
    load_table,
    query,
    report,
    save_table,
    update_with_real,
)
from ttagent.errors import EmptyTableError, PreconditionError
from ttagent.skills import ParametricSkill


def random_table(n, seed=0, land=None):
    rng = np.random.default_rng(seed)
    keys = rng.standard_normal((n, 6)) * [0.3, 0.2, 0.1, 1.0, 2.0, 0.8]
    land = rng.random(n) if land is None else np.full(n, land)
    return DescriptorTable(0, keys, land, rng.normal(4, 1, n), rng.normal(0, 0.3, (n, 2)),
                           rng.random((n, 2)) * 0.1, np.full(n, 10))


@pytest.fixture(scope="module")
def tiny():
    return synth_dataset(24, 0, np.random.default_rng(8))


def test_zero_noise_skill_has_binary_land_rates(skills, tiny, env):
    sk = ParametricSkill(replace(skills[0].spec, execution_noise=(0.0, 0.0)))
    t = build_descriptor(sk, tiny, repetitions=4, env=env)
    assert set(np.unique(t.land)) <= {0.0, 1.0}


def test_repetitions_compose(skills, tiny, env):
    full = build_descriptor(skills[2], tiny, repetitions=10, env=env, seed=3)
    singles = [build_descriptor(skills[2], tiny, repetitions=1, env=env, seed=3, rep_offset=j) for j in range(10)]
    np.testing.assert_allclose(full.land, np.mean([s.land for s in singles], axis=0), atol=1e-12)


def test_entry_count_matches_corpus(skills, tiny, env):
    assert len(build_descriptor(skills[0], tiny, repetitions=1, env=env)) == len(tiny.rally())
    assert len(random_table(28_482)) == 28_482


def test_empty_corpus(skills, env):
    from ttagent.dataset import Dataset

    with pytest.raises(EmptyTableError):
        build_descriptor(skills[0], Dataset(), env=env)


def test_build_is_deterministic(skills, tiny, env, tmp_path):
    a = build_descriptor(skills[4], tiny, repetitions=3, env=env, seed=1)
    b = build_descriptor(skills[4], tiny, repetitions=3, env=env, seed=1)
    save_table(a, tmp_path / "a.csv")
    save_table(b, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_save_load_round_trip(tmp_path):
    t = random_table(50)
    save_table(t, tmp_path / "t.csv")
    u = load_table(tmp_path / "t.csv")
    for name in ("keys", "land", "hit_vel", "landing_mean", "landing_std", "counts", "ids", "scale"):
        np.testing.assert_array_equal(getattr(u, name), getattr(t, name))


def test_exact_key_k1_returns_verbatim():
    t = random_table(200)
    m = query(t, t.keys[17], k=1)
    assert m.land_rate == t.land[17]
    assert m.hit_velocity_y == t.hit_vel[17]
    np.testing.assert_array_equal(m.landing_mean, t.landing_mean[17])


@pytest.mark.parametrize("k", [1, 5, 25])
def test_tree_matches_brute_force(k):
    t = random_table(2000, seed=1)
    rng = np.random.default_rng(2)
    for q in rng.standard_normal((100, 6)) * [0.3, 0.2, 0.1, 1.0, 2.0, 0.8]:
        idx, _ = t.neighbors(q, k)
        np.testing.assert_array_equal(idx, t.brute_neighbors(q, k))


def test_ties_break_by_lower_id():
    keys = np.array([[1.0, 0, 0, 0, 0, 0], [-1.0, 0, 0, 0, 0, 0], [3.0, 0, 0, 0, 0, 0]])
    t = DescriptorTable(0, keys, [0.1, 0.2, 0.3], [0, 0, 0], np.zeros((3, 2)), np.zeros((3, 2)), [1, 1, 1],
                        ids=[7, 4, 9], scale=np.ones(6))
    idx, _ = t.neighbors(np.zeros(6), 1)
    assert t.ids[idx[0]] == 4


def test_k_larger_than_table_is_flagged():
    t = random_table(10)
    m = query(t, np.zeros(6), k=25)
    assert m.truncated and m.sample_count == 100


def test_k_must_be_positive():
    with pytest.raises(PreconditionError):
        query(random_table(10), np.zeros(6), k=0)


@given(st.integers(0, 500), st.integers(1, 40))
@settings(max_examples=60, deadline=None)
def test_query_stays_in_neighbor_envelope(seed, k):
    t = random_table(120, seed=seed % 7)
    q = np.random.default_rng(seed).standard_normal(6)
    m = query(t, q, k)
    idx, _ = t.neighbors(q, k)
    for val, col in ((m.land_rate, t.land), (m.hit_velocity_y, t.hit_vel)):
        assert col[idx].min() - 1e-12 <= val <= col[idx].max() + 1e-12
    for j in range(2):
        assert t.landing_mean[idx, j].min() - 1e-12 <= m.landing_mean[j] <= t.landing_mean[idx, j].max() + 1e-12


def test_equal_weight_update_halves_land_rate():
    t = random_table(300, land=0.8)
    q = t.keys[5]
    idx, _ = t.neighbors(q, 25)
    update_with_real(t, q, SkillMetrics.from_outcome(False))
    np.testing.assert_allclose(t.land[idx], 0.4)
    others = np.setdiff1d(np.arange(300), idx)
    np.testing.assert_allclose(t.land[others], 0.8)


def test_update_with_identical_metrics_is_a_fixed_point():
    t = random_table(100, land=1.0)
    t.hit_vel[:] = 4.0
    t.landing_mean[:] = [0.1, 0.8]
    t.landing_std[:] = 0.0
    before = t.copy()
    update_with_real(t, t.keys[0], SkillMetrics(1.0, 4.0, [0.1, 0.8], [0.0, 0.0]))
    np.testing.assert_array_equal(t.land, before.land)
    np.testing.assert_array_equal(t.hit_vel, before.hit_vel)
    np.testing.assert_array_equal(t.landing_mean, before.landing_mean)
    np.testing.assert_array_equal(t.landing_std, before.landing_std)


def test_sequential_updates_match_replay():
    t = random_table(300, seed=4)
    oracle = t.land.copy()
    rng = np.random.default_rng(5)
    for landed in (False, True, True, False):
        q = t.keys[int(rng.integers(300))] + rng.normal(0, 0.05, 6)
        idx = t.brute_neighbors(q, 25)
        for i in idx:
            oracle[i] = (oracle[i] + float(landed)) / 2
        update_with_real(t, q, SkillMetrics.from_outcome(landed))
    np.testing.assert_allclose(t.land, oracle, atol=1e-15)


def test_land_zero_then_one():
    t = random_table(100, land=0.8)
    q = t.keys[0]
    update_with_real(t, q, SkillMetrics.from_outcome(False))
    update_with_real(t, q, SkillMetrics.from_outcome(True))
    idx, _ = t.neighbors(q, 25)
    np.testing.assert_allclose(t.land[idx], (0.8 * 0.5 + 1.0) * 0.5)


@given(st.lists(st.booleans(), min_size=1, max_size=30), st.integers(0, 100))
@settings(max_examples=40, deadline=None)
def test_updates_keep_land_rate_in_unit_interval(outcomes, seed):
    t = random_table(60, seed=seed % 5)
    rng = np.random.default_rng(seed)
    for o in outcomes:
        update_with_real(t, rng.standard_normal(6), SkillMetrics.from_outcome(o, 3.0, [0.0, 0.9]))
    assert np.all((t.land >= 0) & (t.land <= 1))


def test_pooled_std_merge():
    t = random_table(30)
    t.landing_mean[:] = [0.0, 0.6]
    t.landing_std[:] = [0.1, 0.1]
    update_with_real(t, t.keys[0], SkillMetrics(1.0, 4.0, [0.2, 0.6], [0.0, 0.0]))
    idx, _ = t.neighbors(t.keys[0], 25)
    np.testing.assert_allclose(t.landing_mean[idx], [[0.1, 0.6]] * 25)
    np.testing.assert_allclose(t.landing_std[idx, 0], np.sqrt(0.5 * 0.01 + 0.25 * 0.04))


def test_report_includes_real_columns():
    t = random_table(30)
    update_with_real(t, t.keys[0], SkillMetrics.from_outcome(True, 4.0, [0.0, 0.8]))
    row = report({0: t}, {0: "x"})[0]
    assert row.real_count == 1 and row.real_land_rate == 1.0
