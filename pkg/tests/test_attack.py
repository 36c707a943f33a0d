import numpy as np
import pytest

from poisonlab import attack as at
from poisonlab.data import (
    Dataset,
    TargetSet,
    activity_cap,
    load_interactions,
    select_targets,
    split_dataset,
    synthetic_two_block,
)
from poisonlab.diffusion import DiffusionConfig
from poisonlab.projection import ProjectionConfig, export_profiles
from poisonlab.recommender import RecommenderConfig, pretrain


def tiny_rec(**kw):
    base = dict(d=8, epochs=2, batch_size=64, model="mf", lr=0.05)
    base.update(kw)
    return RecommenderConfig(**base)


def tiny_diff(**kw):
    base = dict(T=5, hidden=8, epochs=3, batch_size=16, lr=1e-3)
    base.update(kw)
    return DiffusionConfig(**base)


@pytest.fixture(scope="module")
def block_train():
    d = synthetic_two_block(40, 24, seed=5, p_in=0.6, p_out=0.1)
    return split_dataset(d, seed=0).train


@pytest.fixture(scope="module")
def block_targets():
    return TargetSet(np.array([3, 17]), "unpopular")


def dlda_config(targets, **kw):
    base = dict(method="dlda", targets=targets, seed=11, injection_ratio=0.05,
                recommender=tiny_rec(), diffusion=tiny_diff())
    base.update(kw)
    return at.AttackConfig(**base)


# ------------------------------------------------------------ config checks

def test_config_rejects_unknown_method(block_targets):
    with pytest.raises(ValueError, match="method"):
        at.AttackConfig(method="average", targets=block_targets, seed=0)


@pytest.mark.parametrize("ratio", [-0.01, 0.0501, 1.0])
def test_config_rejects_out_of_range_ratio(block_targets, ratio):
    with pytest.raises(ValueError, match="injection_ratio"):
        at.AttackConfig(method="random", targets=block_targets, seed=0,
                        injection_ratio=ratio)


@pytest.mark.parametrize("ratio", [0.0, 0.01, 0.05])
def test_config_accepts_boundary_ratios(block_targets, ratio):
    cfg = at.AttackConfig(method="random", targets=block_targets, seed=0,
                          injection_ratio=ratio)
    assert cfg.injection_ratio == ratio


@pytest.mark.parametrize("field,value", [
    ("view_fraction", 0.0), ("view_fraction", 1.2),
    ("pool_fraction", 0.0), ("pool_fraction", -0.5),
    ("popular_fraction", 0.0), ("popular_fraction", 1.01),
    ("n_condition_pairs", 0),
])
def test_config_rejects_bad_fractions_and_counts(block_targets, field, value):
    with pytest.raises(ValueError, match=field):
        at.AttackConfig(method="dlda", targets=block_targets, seed=0,
                        **{field: value})


def test_config_rejects_empty_targets():
    empty = TargetSet(np.empty(0, dtype=np.int64), "unpopular")
    with pytest.raises(ValueError, match="target"):
        at.AttackConfig(method="dlda", targets=empty, seed=0)


@pytest.mark.parametrize("seed", [-1, 2.5])
def test_config_rejects_bad_seed(block_targets, seed):
    with pytest.raises(ValueError, match="seed"):
        at.AttackConfig(method="none", targets=block_targets, seed=seed)


# ------------------------------------------------------------ derived seeds

def test_stage_seeds_deterministic_and_distinct():
    names = ["view", "surrogate", "conditions", "generator"]
    seeds = [at.stage_seed(123, n) for n in names]
    assert seeds == [at.stage_seed(123, n) for n in names]
    assert len(set(seeds)) == len(seeds)
    assert seeds != [at.stage_seed(124, n) for n in names]


def test_trial_seeds_deterministic_and_distinct():
    seeds = at.trial_seeds(7, 5)
    assert len(seeds) == 5
    assert seeds == at.trial_seeds(7, 5)
    assert len(set(seeds)) == 5
    assert all(isinstance(s, int) and 0 <= s < 2**31 for s in seeds)


def test_stage_and_trial_streams_do_not_collide():
    assert at.stage_seed(9, "view") != at.trial_seeds(9, 1)[0]


# ------------------------------------------------------------- sizing rules

def test_n_fake_users_rounds_half_up(block_targets):
    train = Dataset.from_pairs([(u, 0) for u in range(50)], 50, 3)
    cfg = at.AttackConfig(method="random", targets=block_targets, seed=0,
                          injection_ratio=0.05)
    assert at.n_fake_users(cfg, train) == 3  # 2.5 rounds up


def test_n_fake_users_benchmark_scale(block_targets):
    train = Dataset.from_pairs([(u, 0) for u in range(942)], 942, 4)
    cfg = at.AttackConfig(method="random", targets=block_targets, seed=0)
    assert at.n_fake_users(cfg, train) == 9


# ---------------------------------------------------------------- run_none

def test_run_none_returns_clean_matrix(block_train, block_targets):
    run = at.run_attack(at.AttackConfig(method="none", targets=block_targets,
                                        seed=1), block_train)
    assert run.profiles.n_rows == 0
    assert run.poisoned.n_fake == 0
    assert run.poisoned.base is block_train
    assert run.surrogate is None and run.generator is None
    assert np.array_equal(run.poisoned.to_dense(), block_train.to_dense())


def test_zero_ratio_dlda_skips_training(block_train, block_targets):
    run = at.run_dlda(dlda_config(block_targets, injection_ratio=0.0), block_train)
    assert run.profiles.n_rows == 0
    assert run.surrogate is None and run.generator is None
    assert "surrogate" not in run.timings
    assert np.array_equal(run.poisoned.to_dense(), block_train.to_dense())


# -------------------------------------------------------------- run_random

def test_run_random_rows_hit_cap_with_targets(block_train, block_targets):
    cfg = at.AttackConfig(method="random", targets=block_targets, seed=3,
                          injection_ratio=0.05)
    run = at.run_random(cfg, block_train)
    cap = activity_cap(block_train)
    assert run.profiles.n_rows == at.n_fake_users(cfg, block_train)
    assert np.all(run.profiles.rows.sum(axis=1) == cap)
    assert np.all(run.profiles.rows[:, block_targets.items] == 1)
    for p in run.profiles.provenance:
        assert p.cond_user == -1 and p.cond_item == -1
        assert p.drawn_n == cap - block_targets.items.size


def test_run_random_deterministic(block_train, block_targets):
    cfg = at.AttackConfig(method="random", targets=block_targets, seed=3,
                          injection_ratio=0.05)
    a = at.run_random(cfg, block_train)
    b = at.run_random(cfg, block_train)
    assert np.array_equal(a.profiles.rows, b.profiles.rows)
    assert a.profiles.provenance == b.profiles.provenance


def test_heuristic_filler_frequencies_uniform():
    # 10k rows, one target, cap 5: each of the 29 non-target items is a
    # without-replacement draw of 4 from 29, so its count is binomial with
    # p = 4/29; the fixed seed lands every item inside the 3-sigma band
    pairs = [(u, i) for u in range(4) for i in range(u * 5, u * 5 + 5)]
    train = Dataset.from_pairs(pairs, 4, 30)
    prof = at.heuristic_profiles(train, np.array([0]), np.arange(30),
                                 seed=0, n_rows=10000, cap=5)
    counts = prof.rows.sum(axis=0)
    assert counts[0] == 10000
    p = 4 / 29
    sigma = np.sqrt(10000 * p * (1 - p))
    assert np.all(np.abs(counts[1:] - 10000 * p) < 3 * sigma)


def test_heuristic_rejects_cap_below_targets():
    train = Dataset.from_pairs([(0, 0), (0, 1), (1, 2)], 2, 6)
    with pytest.raises(ValueError, match="cannot hold"):
        at.heuristic_profiles(train, np.array([1, 2, 3]), np.arange(6),
                              seed=0, n_rows=1, cap=2)


def test_run_random_cap_equal_targets_gives_target_only_rows():
    # every user has exactly 2 interactions, so the cap equals the target
    # count and rows carry nothing else
    pairs = [(u, i) for u in range(6) for i in (2 * u % 8, (2 * u + 1) % 8)]
    train = Dataset.from_pairs(pairs, 6, 8)
    assert activity_cap(train) == 2
    targets = TargetSet(np.array([3, 7]), "unpopular")
    cfg = at.AttackConfig(method="random", targets=targets, seed=0,
                          injection_ratio=0.05)
    run = at.run_random(cfg, train)
    assert np.all(run.profiles.rows.sum(axis=1) == 2)
    assert np.all(run.profiles.rows[:, targets.items] == 1)


# ----------------------------------------------------------- run_bandwagon

def test_bandwagon_pool_takes_floor_of_catalogue():
    pairs = [(0, i) for i in range(1447)]
    train = Dataset.from_pairs(pairs, 1, 1447)
    assert at.bandwagon_pool(train, 0.1).size == 144


def test_bandwagon_pool_orders_by_count_then_index():
    # counts per item: [1, 3, 3, 0]; top 2 are items 1 and 2 (tie keeps the
    # lower index first, both survive the cut)
    pairs = [(0, 0), (0, 1), (1, 1), (2, 1), (0, 2), (1, 2), (2, 2)]
    train = Dataset.from_pairs(pairs, 3, 4)
    assert at.bandwagon_pool(train, 0.5).tolist() == [1, 2]
    assert at.bandwagon_pool(train, 0.25).tolist() == [1]


def test_bandwagon_pool_rejects_bad_fraction():
    train = Dataset.from_pairs([(0, 0)], 1, 2)
    with pytest.raises(ValueError, match="popular_fraction"):
        at.bandwagon_pool(train, 0.0)


def test_run_bandwagon_fillers_come_from_popular_pool(block_train, block_targets):
    cfg = at.AttackConfig(method="bandwagon", targets=block_targets, seed=4,
                          injection_ratio=0.05, popular_fraction=0.5)
    run = at.run_bandwagon(cfg, block_train)
    pool = set(at.bandwagon_pool(block_train, 0.5).tolist())
    allowed = pool | set(block_targets.items.tolist())
    cap = activity_cap(block_train)
    for row in run.profiles.rows:
        picked = set(np.flatnonzero(row).tolist())
        assert row.sum() == cap
        assert picked <= allowed


def test_run_bandwagon_tops_up_when_pool_is_small():
    # cap 10, one target, pool of 2 popular items: rows must still reach the
    # cap by borrowing random non-target fillers, and always carry the pool
    pairs = [(u, i) for u in range(3) for i in range(10)]
    train = Dataset.from_pairs(pairs, 3, 20)
    targets = TargetSet(np.array([15]), "unpopular")
    cfg = at.AttackConfig(method="bandwagon", targets=targets, seed=2,
                          injection_ratio=0.05, popular_fraction=0.1)
    run = at.run_bandwagon(cfg, train)
    pool = at.bandwagon_pool(train, 0.1)
    assert pool.size == 2
    for row in run.profiles.rows:
        assert row.sum() == 10
        assert np.all(row[pool] == 1) and row[15] == 1


def test_run_bandwagon_full_catalogue_matches_run_random(block_train, block_targets):
    cfg_b = at.AttackConfig(method="bandwagon", targets=block_targets, seed=11,
                            injection_ratio=0.05, popular_fraction=1.0)
    cfg_r = at.AttackConfig(method="random", targets=block_targets, seed=11,
                            injection_ratio=0.05)
    rows_b = at.run_bandwagon(cfg_b, block_train).profiles.rows
    rows_r = at.run_random(cfg_r, block_train).profiles.rows
    assert np.array_equal(rows_b, rows_r)


# ---------------------------------------------------------------- run_dlda

@pytest.fixture(scope="module")
def dlda_run(block_train, block_targets):
    return at.run_dlda(dlda_config(block_targets), block_train)


def test_dlda_structural_contract(dlda_run, block_train, block_targets):
    run = dlda_run
    m_a = at.n_fake_users(run.config, block_train)
    assert run.profiles.rows.shape == (m_a, block_train.n_items)
    assert set(np.unique(run.profiles.rows)) <= {0, 1}
    assert np.all(run.profiles.rows[:, block_targets.items] == 1)
    assert np.all(run.profiles.rows.sum(axis=1) <= run.projection.n_max)
    assert run.surrogate is not None and run.generator is not None
    assert run.poisoned.n_fake == m_a and run.poisoned.n_real == block_train.n_users
    assert set(run.timings) == {"view", "surrogate", "conditions",
                                "generator", "profiles", "injection"}


def test_dlda_records_bottleneck_diagnostic(dlda_run):
    value = dlda_run.diagnostics["bottleneck_logdet"]
    assert isinstance(value, float) and np.isfinite(value)


def test_heuristics_record_no_diagnostics(block_train, block_targets):
    cfg = at.AttackConfig(method="random", targets=block_targets, seed=3,
                          injection_ratio=0.05)
    assert at.run_random(cfg, block_train).diagnostics == {}


def test_dlda_provenance_records_conditioning(dlda_run, block_train):
    for k, p in enumerate(dlda_run.profiles.provenance):
        assert p.row_seed == k
        assert 0 <= p.cond_user < block_train.n_users
        assert 0 <= p.cond_item < block_train.n_items
        assert p.drawn_n <= dlda_run.projection.n_max


def test_dlda_derives_projection_from_full_training_data(dlda_run, block_train,
                                                         block_targets):
    # the cap and rate come from the victim-side matrix, not the sampled
    # view, so row sizes stay in line with real users
    assert dlda_run.cap == activity_cap(block_train)
    assert dlda_run.projection.n_max == dlda_run.cap
    expected = max(1.0, block_train.n_interactions / block_train.n_users
                   - block_targets.items.size)
    assert dlda_run.projection.lam_pois == expected


def test_dlda_respects_explicit_projection(block_train, block_targets):
    proj = ProjectionConfig(lam_pois=4.0, n_max=3)
    run = at.run_dlda(dlda_config(block_targets, projection=proj), block_train)
    assert run.projection is proj
    assert np.all(run.profiles.rows.sum(axis=1) <= 3)


def test_dlda_reruns_are_byte_identical(block_train, block_targets, tmp_path):
    cfg = dlda_config(block_targets)
    paths = []
    for tag in ("a", "b"):
        run = at.run_dlda(cfg, block_train)
        tsv, js = tmp_path / f"{tag}.tsv", tmp_path / f"{tag}.json"
        export_profiles(run.profiles, block_train.item_ids, tsv, js)
        paths.append((tsv, js))
    assert paths[0][0].read_bytes() == paths[1][0].read_bytes()
    assert paths[0][1].read_bytes() == paths[1][1].read_bytes()


def test_dlda_seed_changes_profiles(block_train, block_targets):
    a = at.run_dlda(dlda_config(block_targets, seed=11), block_train)
    b = at.run_dlda(dlda_config(block_targets, seed=12), block_train)
    assert not np.array_equal(a.profiles.rows, b.profiles.rows)


def test_dlda_leaves_real_interactions_untouched(block_train, block_targets):
    before = block_train.interactions.copy()
    run = at.run_dlda(dlda_config(block_targets), block_train)
    assert run.poisoned.base is block_train
    assert np.array_equal(block_train.interactions, before)


def test_dlda_emits_artifacts_in_stage_order(block_train, block_targets):
    seen = []
    at.run_dlda(dlda_config(block_targets), block_train,
                on_artifact=lambda name, payload: seen.append(name))
    assert seen == ["surrogate", "generator", "profiles"]


def test_dlda_benchmark_scale_rows(ml100k_shaped_path):
    # 942 users at the default 1% ratio inject exactly 9 profiles, each
    # carrying every target item
    d = load_interactions(ml100k_shaped_path)
    train = split_dataset(d, seed=0).train
    targets = select_targets(d, 5, "unpopular", seed=1)
    cfg = at.AttackConfig(
        method="dlda", targets=targets, seed=7,
        recommender=tiny_rec(epochs=1),
        diffusion=tiny_diff(epochs=2, batch_size=32),
    )
    run = at.run_dlda(cfg, train)
    assert run.profiles.n_rows == 9
    assert np.all(run.profiles.rows[:, targets.items] == 1)
    assert np.all(run.profiles.rows.sum(axis=1) <= activity_cap(train))


# -------------------------------------------------------------- stage errors

def test_surrogate_divergence_names_its_stage(block_train, block_targets):
    cfg = dlda_config(block_targets, recommender=tiny_rec(lr=1e30))
    with pytest.raises(at.StageError, match="surrogate") as exc:
        at.run_dlda(cfg, block_train)
    assert exc.value.stage == "surrogate"
    assert exc.value.checkpoint is None


def test_generator_divergence_names_its_stage(block_train, block_targets):
    cfg = dlda_config(block_targets,
                      diffusion=tiny_diff(epochs=60, lr=1e100, lam_disp=1.0))
    with pytest.raises(at.StageError) as exc:
        at.run_dlda(cfg, block_train)
    assert exc.value.stage == "generator"


def test_projection_failure_names_profile_stage(block_train, block_targets):
    cfg = dlda_config(block_targets,
                      projection=ProjectionConfig(lam_pois=5.0, n_max=1))
    with pytest.raises(at.StageError, match="n_max") as exc:
        at.run_dlda(cfg, block_train)
    assert exc.value.stage == "profiles"


def test_heuristic_cap_failure_names_profile_stage():
    train = Dataset.from_pairs([(u, u % 3) for u in range(40)], 40, 8)
    targets = TargetSet(np.array([4, 5, 6]), "unpopular")
    cfg = at.AttackConfig(method="random", targets=targets, seed=0,
                          injection_ratio=0.05)
    with pytest.raises(at.StageError) as exc:
        at.run_random(cfg, train)
    assert exc.value.stage == "profiles"


# ------------------------------------------------------------------- victim

def test_training_dataset_appends_fake_users(block_train, block_targets):
    cfg = at.AttackConfig(method="random", targets=block_targets, seed=3,
                          injection_ratio=0.05)
    run = at.run_random(cfg, block_train)
    combined = at.training_dataset(run.poisoned)
    m_a = run.poisoned.n_fake
    assert combined.n_users == block_train.n_users + m_a
    assert combined.n_items == block_train.n_items
    assert combined.n_interactions == (block_train.n_interactions
                                       + int(run.profiles.rows.sum()))
    assert combined.user_ids[-m_a:] == [f"fake_{k}" for k in range(m_a)]
    real_part = combined.interactions[combined.interactions[:, 0] < block_train.n_users]
    assert np.array_equal(real_part, block_train.interactions)
    fake_part = combined.interactions[combined.interactions[:, 0] >= block_train.n_users]
    dense = np.zeros((m_a, block_train.n_items), dtype=np.int64)
    dense[fake_part[:, 0] - block_train.n_users, fake_part[:, 1]] = 1
    assert np.array_equal(dense, run.profiles.rows)


def test_retrain_victim_on_clean_matrix_matches_direct_pretraining(block_train,
                                                                   block_targets):
    run = at.run_none(at.AttackConfig(method="none", targets=block_targets,
                                      seed=1), block_train)
    cfg = tiny_rec()
    victim = at.retrain_victim(run.poisoned, cfg, seed=9)
    direct = pretrain(cfg, block_train, seed=9)
    assert np.array_equal(victim.user, direct.user)
    assert np.array_equal(victim.item, direct.item)


def test_retrain_victim_deterministic_and_covers_fakes(block_train, block_targets):
    cfg = at.AttackConfig(method="random", targets=block_targets, seed=3,
                          injection_ratio=0.05)
    run = at.run_random(cfg, block_train)
    a = at.retrain_victim(run.poisoned, tiny_rec(), seed=5)
    b = at.retrain_victim(run.poisoned, tiny_rec(), seed=5)
    assert np.array_equal(a.user, b.user) and np.array_equal(a.item, b.item)
    assert a.user.shape[0] == block_train.n_users + run.poisoned.n_fake
    assert a.item.shape[0] == block_train.n_items


# ----------------------------------------------------------------- dispatch

def test_run_attack_dispatches_by_method(block_train, block_targets):
    r = at.run_attack(at.AttackConfig(method="random", targets=block_targets,
                                      seed=3, injection_ratio=0.05), block_train)
    b = at.run_attack(at.AttackConfig(method="bandwagon", targets=block_targets,
                                      seed=3, injection_ratio=0.05), block_train)
    assert r.profiles.n_rows > 0 and b.profiles.n_rows > 0
    assert not np.array_equal(r.profiles.rows, b.profiles.rows)


def test_run_attack_dlda_equals_run_dlda(block_train, block_targets):
    cfg = dlda_config(block_targets)
    via_dispatch = at.run_attack(cfg, block_train)
    direct = at.run_dlda(cfg, block_train)
    assert np.array_equal(via_dispatch.profiles.rows, direct.profiles.rows)
