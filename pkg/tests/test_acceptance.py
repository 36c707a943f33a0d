"""Acceptance gate: one test per shipped guarantee, tight budgets included.

Each test freezes the full configuration (seeds, sizes, schedules) so a
pass here means the same bytes and numbers reproduce on any machine.
Budgets are wall-clock ceilings, generous next to the measured runtimes.
"""

import json
import math
import time

import numpy as np
import pytest

from helpers import assert_grads_close
from poisonlab import attack as at
from poisonlab import cli
from poisonlab import diffcore as dc
from poisonlab import diffusion as df
from poisonlab import evaluation as ev
from poisonlab import projection as pj
from poisonlab import recommender as rec
from poisonlab.config import (
    AttackSettings,
    DataSettings,
    EvaluationSettings,
    default_config,
    manifest_identity,
)
from poisonlab.serialize import canonical_json
from poisonlab.data import Dataset, TargetSet, split_dataset, synthetic_two_block
from poisonlab.geometry import logdet_covariance


# ------------------------------------------------------- 1: gradient suite

def _op_cases(rng):
    """One weighted-sum loss per op kind; weights break vjp symmetries."""
    a = dc.Parameter(rng.normal(size=(3, 4)), "a")
    b = dc.Parameter(rng.normal(size=(4, 2)), "b")
    c = dc.Parameter(rng.normal(size=(3, 4)), "c")
    pos = dc.Parameter(rng.uniform(0.5, 2.0, size=(3, 4)), "pos")
    off = dc.Parameter(rng.normal(size=(3, 4)) + np.where(rng.normal(size=(3, 4)) > 0, 0.6, -0.6), "off")
    w34 = rng.normal(size=(3, 4))
    w32 = rng.normal(size=(3, 2))
    w38 = rng.normal(size=(3, 8))
    w1 = rng.normal(size=(3, 1))

    def wsum(t, w):
        return dc.tensor_sum(dc.mul(t, dc.Tensor(w)))

    return {
        "matmul": ([a, b], lambda: wsum(dc.matmul(a, b), w32)),
        "add": ([a, c], lambda: wsum(dc.add(a, c), w34)),
        "sub": ([a, c], lambda: wsum(dc.sub(a, c), w34)),
        "mul": ([a, c], lambda: wsum(dc.mul(a, c), w34)),
        "scale": ([a], lambda: wsum(dc.scale(a, -1.7), w34)),
        "sum": ([a], lambda: wsum(dc.tensor_sum(a, axis=1, keepdims=True), w1)),
        "mean": ([a], lambda: wsum(dc.tensor_mean(a, axis=1, keepdims=True), w1)),
        "relu": ([off], lambda: wsum(dc.relu(off), w34)),
        "silu": ([a], lambda: wsum(dc.silu(a), w34)),
        "sigmoid": ([a], lambda: wsum(dc.sigmoid(a), w34)),
        "softmax-lastdim": ([a], lambda: wsum(dc.softmax_lastdim(a), w34)),
        "l2norm-sq": ([a], lambda: wsum(dc.l2norm_sq(a, axis=1, keepdims=True), w1)),
        "exp": ([a], lambda: wsum(dc.exp(a), w34)),
        "log": ([pos], lambda: wsum(dc.log(pos), w34)),
        "concat": ([a, c], lambda: wsum(dc.concat([a, c], axis=1), w38)),
        "slice": ([a], lambda: wsum(dc.slice_axis(a, 1, 1, 3), w34[:, 1:3])),
    }


def _loss_cases(rng):
    """Every composite loss the lab trains or regularizes with."""
    user_emb = dc.Parameter(rng.normal(size=(5, 3)), "user_emb")
    item_emb = dc.Parameter(rng.normal(size=(6, 3)), "item_emb")
    triples = rng.integers(0, 5, size=(7, 1))
    triples = np.column_stack([triples[:, 0],
                               rng.integers(0, 6, size=7),
                               rng.integers(0, 6, size=7)])
    uvec = dc.Parameter(rng.normal(size=(4, 3)), "uvec")
    ivec = dc.Parameter(rng.normal(size=(4, 3)), "ivec")
    bott = dc.Parameter(rng.normal(size=(4, 3)), "bott")

    cfg = df.DiffusionConfig(T=5, beta_start=0.05, beta_end=0.3, hidden=4,
                             lam_disp=0.7, tau=0.9)
    sched = df.schedule_from_config(cfg)
    dn = df.init_denoiser(cfg, 3, 2, np.random.default_rng(9))
    z0 = rng.normal(size=(4, 3))
    zu = rng.normal(size=(4, 2))
    zv = rng.normal(size=(4, 2))

    return {
        "bpr": ([user_emb, item_emb],
                lambda: rec.bpr_loss(user_emb, item_emb, triples, 0.3)),
        "alignment": ([uvec, ivec], lambda: rec.align_loss(uvec, ivec)),
        "uniformity": ([uvec, ivec], lambda: rec.uniform_loss(uvec, ivec)),
        "pretraining": ([user_emb, item_emb],
                        lambda: rec.pretrain_loss(user_emb, item_emb, triples, 0.3, 0.4)),
        "noise-prediction": (dn.params(),
                             lambda: df.diffusion_loss(z0, zu, zv, dn, sched, seed=31)),
        "dispersive": ([bott], lambda: df.dispersive_loss(bott, 0.9)),
        "generator-total": (dn.params(),
                            lambda: df.total_loss(z0, zu, zv, dn, sched,
                                                  np.random.default_rng(123),
                                                  cfg.lam_disp, cfg.tau)[0]),
    }


def test_acceptance_01_gradients_all_ops_and_losses():
    t0 = time.monotonic()
    ops = _op_cases(np.random.default_rng(1))
    assert set(ops) == set(dc.OPS)
    for name, (params, loss_fn) in ops.items():
        assert_grads_close(loss_fn, params, rtol=1e-4)
    for name, (params, loss_fn) in _loss_cases(np.random.default_rng(2)).items():
        assert_grads_close(loss_fn, params, rtol=1e-4)
    assert time.monotonic() - t0 < 30.0


# ------------------------------------------- 2: ranking metrics vs brute force

def _brute_top(user_vec, item_mat, k, exclude):
    scored = [(-float(user_vec @ item_mat[i]), i)
              for i in range(item_mat.shape[0]) if i not in exclude]
    return [i for _, i in sorted(scored)[:k]]


def _brute_hit(table, users, targets, k, train_items):
    tset = set(int(t) for t in targets)
    wins = [bool(tset & set(_brute_top(table.user[u], table.item, k,
                                       set(int(i) for i in train_items[u]))))
            for u in users]
    return sum(wins) / len(users)


def _brute_ndcg(table, users, relevant, k, train_items):
    total = 0.0
    for u in users:
        rel = set(int(i) for i in relevant[u])
        ideal = min(len(rel), k)
        if ideal == 0:
            continue
        top = _brute_top(table.user[u], table.item, k,
                         set(int(i) for i in train_items[u]))
        dcg = sum(1.0 / math.log2(r + 1) for r, i in enumerate(top, start=1) if i in rel)
        total += dcg / sum(1.0 / math.log2(r + 1) for r in range(1, ideal + 1))
    return total / len(users)


def test_acceptance_02_ranking_metrics_match_brute_force():
    # integer-valued embeddings make every dot product and tie exact
    t0 = time.monotonic()
    rng = np.random.default_rng(20250814)
    for _ in range(1000):
        m = int(rng.integers(2, 31))
        n = int(rng.integers(5, 26))
        d = int(rng.integers(2, 5))
        table = rec.EmbeddingTable(rng.integers(-2, 3, size=(m, d)).astype(float),
                                   rng.integers(-2, 3, size=(n, d)).astype(float))
        k = int(rng.integers(1, min(10, n) + 1))
        train_items = []
        for u in range(m):
            ex = np.flatnonzero(rng.random(n) < 0.2)
            train_items.append(ex if ex.size < n else ex[:n - 1])
        users = list(range(m))
        targets = rng.choice(n, size=int(rng.integers(1, 4)), replace=False)
        relevant = [targets if rng.random() < 0.8 else np.array([], dtype=np.int64)
                    for _ in range(m)]
        assert ev.hit_at_k(table, users, targets, k, train_items) \
            == _brute_hit(table, users, targets, k, train_items)
        assert ev.ndcg_at_k(table, users, relevant, k, train_items) \
            == _brute_ndcg(table, users, relevant, k, train_items)
    assert time.monotonic() - t0 < 10.0


# ------------------------------------------------- 3: single-point overfit

def test_acceptance_03_generator_overfits_single_latent():
    # one latent replicated through 2000 steps must be recovered to 10%;
    # the short hot schedule ends near alpha_bar ~= 0 so the reverse chain
    # starts from the same N(0, I) the sampler draws from
    t0 = time.monotonic()
    rng = np.random.default_rng(42)
    z0 = rng.normal(size=8)
    zu = rng.normal(size=8)
    zv = rng.normal(size=8)
    cfg = df.DiffusionConfig(T=20, beta_start=0.02, beta_end=0.35, hidden=16,
                             epochs=2000, batch_size=16, lr=5e-3, lam_disp=0.0)
    pool = np.repeat(z0[None, :], 16, axis=0)
    params = df.train_generator(cfg, pool, zu[None, :], zv[None, :], seed=7)
    sched = df.schedule_from_config(cfg)
    errs = [np.linalg.norm(df.sample_latent(params, sched, zu, zv, 1000 + i) - z0)
            for i in range(100)]
    assert float(np.mean(errs)) <= 0.1 * np.linalg.norm(z0)
    assert time.monotonic() - t0 < 60.0


# --------------------------------------------- 4: forward-process marginal

def test_acceptance_04_forward_noise_variance_matches_closed_form():
    sched = df.make_schedule(50, 1e-4, 0.02)
    rng = np.random.default_rng(77)
    true_var = np.array([0.5, 1.0, 2.0, 3.0]) ** 2
    z0 = 1.5 + rng.normal(size=(10_000, 4)) * np.sqrt(true_var)
    for t in (10, 25):
        eps = rng.standard_normal(z0.shape)
        z_t = df.forward_noise(z0, np.full(z0.shape[0], t), eps, sched)
        want = sched.alpha_bar[t] * true_var + (1.0 - sched.alpha_bar[t])
        rel = np.abs(z_t.var(axis=0) - want) / want
        assert float(rel.max()) < 0.03


# ------------------------------------- 5: dispersive regularizer diagnostic

def test_acceptance_05_dispersive_regularizer_spreads_bottlenecks():
    # hand values first: two points at squared distance 1 with tau=0.5
    # give log exp(-2) = -2; three collinear points at squared distances
    # (1, 1, 4) with tau=1 give log((4 e^-1 + 2 e^-4) / 6)
    two = np.array([[0.0], [1.0]])
    assert float(df.dispersive_loss(two, 0.5).data) == pytest.approx(-2.0, abs=1e-9)
    three = np.array([[0.0], [1.0], [-1.0]])
    want = math.log((4 * math.exp(-1) + 2 * math.exp(-4)) / 6)
    assert float(df.dispersive_loss(three, 1.0).data) == pytest.approx(want, abs=1e-9)
    assert want == pytest.approx(-1.380876370001407, abs=1e-12)

    rng = np.random.default_rng(11)
    z0_pool = rng.normal(size=(32, 8))
    cu = rng.normal(size=(16, 8))
    cv = rng.normal(size=(16, 8))
    base = dict(T=10, hidden=8, epochs=120, batch_size=16, lr=5e-3, tau=0.5)
    wins = 0
    for seed in range(100, 105):
        spread = df.train_generator(df.DiffusionConfig(lam_disp=1.0, **base),
                                    z0_pool, cu, cv, seed=seed)
        plain = df.train_generator(df.DiffusionConfig(lam_disp=0.0, **base),
                                   z0_pool, cu, cv, seed=seed)
        ld = {}
        for name, params in (("spread", spread), ("plain", plain)):
            m = df.bottleneck_probe(params, df.DiffusionConfig(lam_disp=1.0, **base),
                                    z0_pool, cu, cv, seed=999)
            ld[name] = logdet_covariance(m)
        wins += ld["spread"] > ld["plain"]
    assert wins >= 4


# ----------------------------------------------- 7: projection statistics

def test_acceptance_07_projection_poisson_cardinality_and_target_guarantee():
    n_items, d = 256, 8
    rng = np.random.default_rng(515)
    item_emb = rng.normal(size=(n_items, d))
    cfg = pj.ProjectionConfig(lam_pois=20.0, n_max=n_items, delta=-np.inf)
    sizes = []
    for _ in range(10_000):
        z = rng.normal(size=d)
        target = int(rng.integers(n_items))
        out = pj.project_profile(z, item_emb, cfg, np.array([target]), rng)
        sizes.append(out.active_size)
        assert out.row[target] == 1
        assert int(out.row.sum()) <= cfg.n_max
    assert abs(float(np.mean(sizes)) - 20.0) / 20.0 < 0.02

    capped = pj.ProjectionConfig(lam_pois=20.0, n_max=15, delta=-np.inf)
    rng2 = np.random.default_rng(616)
    for _ in range(2_000):
        z = rng2.normal(size=d)
        target = int(rng2.integers(n_items))
        out = pj.project_profile(z, item_emb, capped, np.array([target]), rng2)
        assert out.row[target] == 1
        assert int(out.row.sum()) <= 15


# ------------------------------------------------- 8: stealth-metric sanity

def test_acceptance_08_stealth_metric_sanity():
    rng = np.random.default_rng(404)
    # exact whitening makes the population covariance the identity, so the
    # metric must collapse to plain distance from the mean
    raw = rng.normal(size=(400, 6)) @ rng.normal(size=(6, 6))
    centered = raw - raw.mean(axis=0)
    cov = centered.T @ centered / raw.shape[0]
    white = centered @ np.linalg.inv(np.linalg.cholesky(cov)).T
    pts = rng.normal(size=(50, 6)) * 2.0
    mah = ev.mahalanobis(pts, white, eps_scale=0.0)
    euc = np.linalg.norm(pts - white.mean(axis=0), axis=1)
    np.testing.assert_allclose(mah, euc, rtol=0.0, atol=1e-9)

    inliers = rng.normal(size=(256, 4))
    outliers = rng.normal(size=(20, 4)) + 9.0
    in_scores = ev.isolation_forest_score(inliers, inliers, seed=3)
    out_scores = ev.isolation_forest_score(outliers, inliers, seed=3)
    assert float(out_scores.max()) < float(np.median(in_scores))

    real = rng.normal(size=(200, 5))
    fake_same = rng.normal(size=(100, 5))
    fake_far = rng.normal(size=(100, 5)) + 50.0
    assert ev.rvc_entropy(real, fake_same, k_neighbors=10) >= 0.8
    assert ev.rvc_entropy(real, fake_far, k_neighbors=10) <= 0.05


# -------------------------------------------------- 9: rerun determinism

def test_acceptance_09_rerun_byte_identical_artifacts(tmp_path, monkeypatch):
    # identical config, two fresh working directories: every artifact of
    # attack + evaluate must come out byte for byte the same; the manifest
    # is compared minus its wall-clock block, the one run-time field
    d = synthetic_two_block(40, 24, seed=5, p_in=0.6, p_out=0.1)
    data_path = tmp_path / "toy.tsv"
    with open(data_path, "w", encoding="utf-8") as f:
        for u, i in d.interactions:
            f.write(f"u{u}\ti{i}\n")

    def run(workdir):
        workdir.mkdir()
        monkeypatch.chdir(workdir)
        config = default_config(
            data=DataSettings(path=str(data_path), split_seed=0),
            attack=AttackSettings(method="dlda", injection_ratio=0.05, n_targets=2),
            recommender=rec.RecommenderConfig(d=8, epochs=2, batch_size=64,
                                              model="mf", lr=0.05),
            diffusion=df.DiffusionConfig(T=5, hidden=8, epochs=3,
                                         batch_size=16, lr=1e-3),
            evaluation=EvaluationSettings(ks=(3, 5), n_trials=2),
            seed=11,
            out_dir="runs",
        )
        cli.cmd_attack(config)
        run_dir = cli.run_dir_for(config)
        cli.cmd_evaluate(run_dir)
        return {p.name: p.read_bytes() for p in run_dir.iterdir() if p.is_file()}

    first = run(tmp_path / "one")
    second = run(tmp_path / "two")
    assert sorted(first) == sorted(second)
    for name, blob in first.items():
        if name == "manifest.json":
            a, b = (canonical_json(manifest_identity(json.loads(x)))
                    for x in (blob, second[name]))
            assert a == b
        else:
            assert second[name] == blob, f"artifact {name} differs between reruns"


# --------------------------------------------- 10: benchmark ingest parity

def test_acceptance_10_benchmark_ingest_summary_line(ml100k_shaped_path, capsys):
    cli.cmd_ingest(ml100k_shaped_path)
    out = capsys.readouterr().out
    assert "users=942 items=1447 interactions=55375" in out
    assert "avg_interactions=38.27" in out
    assert "sparsity=95.94%" in out


@pytest.mark.xfail(reason="the reference summary quotes 96.49% sparsity for "
                   "942 x 1447 with 55375 interactions, but those counts "
                   "give 1 - 55375/(942*1447) = 95.94%; the printed line "
                   "stays consistent with the counts", strict=True)
def test_acceptance_10_reference_sparsity_quote(ml100k_shaped_path, capsys):
    cli.cmd_ingest(ml100k_shaped_path)
    assert "sparsity=96.49%" in capsys.readouterr().out
