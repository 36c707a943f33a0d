"""Attack outcome measurement.

Two families of metrics.  Effectiveness: hit ratio and NDCG at K for the
promoted targets and for held-out positives, on clean and poisoned victims,
with deltas against the clean baseline.  Stealth: distributional and
neighborhood statistics comparing fake user embeddings against real ones
(Mahalanobis distance, kernel density score, isolation forest, kNN-graph
degree, classifier entropy, covariance log-determinant, group centroids)
plus a 3-component PCA export for visualization.

Only real users are ever ranked or treated as test users; fake rows enter
solely as the scored group of the stealth battery.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from sklearn.ensemble import IsolationForest

from .geometry import logdet_covariance  # noqa: F401  (part of this module's API)
from .recommender import EmbeddingTable, top_k
from .serialize import read_json, write_json

EFFECTIVENESS_KIND = "effectiveness-report"
STEALTH_KIND = "stealth-report"
REPORT_SCHEMA = 1


# ----------------------------------------------------------------- ranking

def hit_at_k(table: EmbeddingTable, users, targets, k: int, train_items) -> float:
    """Fraction of ``users`` whose top-k (training positives excluded)
    contains at least one target item."""
    users = [int(u) for u in np.asarray(users, dtype=np.int64).reshape(-1)]
    if not users:
        raise ValueError("no users to evaluate")
    tset = {int(i) for i in np.asarray(targets, dtype=np.int64).reshape(-1)}
    hits = 0
    for u in users:
        top = top_k(table, u, k, exclude=train_items[u])
        hits += any(int(i) in tset for i in top)
    return hits / len(users)


def ndcg_at_k(table: EmbeddingTable, users, relevant, k: int, train_items) -> float:
    """Mean NDCG@k with binary relevance.

    Per user, DCG sums 1/log2(rank+1) over relevant items in the top-k
    (training positives excluded from the ranking); the ideal DCG packs
    min(|relevant|, k) hits at the top.  Users with empty relevant sets
    contribute zero but stay in the denominator.
    """
    users = [int(u) for u in np.asarray(users, dtype=np.int64).reshape(-1)]
    if not users:
        raise ValueError("no users to evaluate")
    total = 0.0
    for u in users:
        rel = {int(i) for i in np.asarray(relevant[u], dtype=np.int64).reshape(-1)}
        ideal = min(len(rel), k)
        if ideal == 0:
            continue
        top = top_k(table, u, k, exclude=train_items[u])
        dcg = sum(1.0 / math.log2(r + 1) for r, i in enumerate(top, start=1) if int(i) in rel)
        idcg = sum(1.0 / math.log2(r + 1) for r in range(1, ideal + 1))
        total += dcg / idcg
    return total / len(users)


def ranking_metrics(table: EmbeddingTable, train, test, target_items,
                    ks=(10, 50)) -> dict:
    """Target and global hit/NDCG at every K, over users holding at least
    one test interaction."""
    test_items = test.user_items()
    train_items = train.user_items()
    users = [u for u in range(test.n_users) if test_items[u].size]
    targets = np.asarray(target_items, dtype=np.int64).reshape(-1)
    target_rel = {u: targets for u in users}
    out = {}
    for k in ks:
        out[f"target_hit@{k}"] = hit_at_k(table, users, targets, k, train_items)
        out[f"target_ndcg@{k}"] = ndcg_at_k(table, users, target_rel, k, train_items)
        out[f"global_hit@{k}"] = hit_at_k_global(table, users, test_items, k, train_items)
        out[f"global_ndcg@{k}"] = ndcg_at_k(table, users, test_items, k, train_items)
    return out


def hit_at_k_global(table: EmbeddingTable, users, test_items, k: int, train_items) -> float:
    """Fraction of users with at least one held-out positive in their top-k."""
    users = [int(u) for u in np.asarray(users, dtype=np.int64).reshape(-1)]
    if not users:
        raise ValueError("no users to evaluate")
    hits = 0
    for u in users:
        rel = {int(i) for i in test_items[u]}
        top = top_k(table, u, k, exclude=train_items[u])
        hits += any(int(i) in rel for i in top)
    return hits / len(users)


def global_delta(clean: dict, poisoned: dict) -> dict:
    """Elementwise poisoned minus clean; the metric sets must match."""
    if set(clean) != set(poisoned):
        raise ValueError("metric sets do not match; reports come from different runs")
    return {k: poisoned[k] - clean[k] for k in clean}


def effectiveness_trial(clean_table: EmbeddingTable, poisoned_table: EmbeddingTable,
                        train, test, target_items, ks=(10, 50)) -> dict:
    clean = ranking_metrics(clean_table, train, test, target_items, ks)
    poisoned = ranking_metrics(poisoned_table, train, test, target_items, ks)
    return {"clean": clean, "poisoned": poisoned, "delta": global_delta(clean, poisoned)}


def effectiveness_report(trials, ks=(10, 50)) -> dict:
    """Aggregate per-trial metric dicts into the serializable report:
    per-trial values plus mean and population variance per metric."""
    trials = list(trials)
    if not trials:
        raise ValueError("at least one trial required")
    keys = sorted(trials[0]["clean"])
    for t in trials:
        for section in ("clean", "poisoned", "delta"):
            if sorted(t[section]) != keys:
                raise ValueError("trials do not share a metric set")
    for k in ks:
        if f"target_hit@{k}" not in keys:
            raise ValueError(f"trials carry no metrics for k={k}")
    mean = {}
    variance = {}
    for section in ("clean", "poisoned", "delta"):
        vals = {key: [t[section][key] for t in trials] for key in keys}
        mean[section] = {key: float(np.mean(v)) for key, v in vals.items()}
        variance[section] = {key: float(np.var(v)) for key, v in vals.items()}
    return {
        "kind": EFFECTIVENESS_KIND,
        "schema_version": REPORT_SCHEMA,
        "k_list": [int(k) for k in ks],
        "n_trials": len(trials),
        "trials": trials,
        "mean": mean,
        "variance": variance,
    }


# ----------------------------------------------------- distribution metrics

def _as_batch(points) -> tuple[np.ndarray, bool]:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        return pts[None, :], True
    return pts, False


def _population_cov(x: np.ndarray) -> np.ndarray:
    centered = x - x.mean(axis=0)
    return centered.T @ centered / x.shape[0]


def mahalanobis(points, real, eps_scale: float = 1e-6):
    """Distance of each point from the real-user distribution,
    sqrt((x-mu)^T Sigma^-1 (x-mu)) with population mu and Sigma.

    The covariance gets a trace-scaled ridge eps_scale*trace/d; pass 0 to
    disable.  A covariance still singular after the ridge is rejected.
    """
    real = np.asarray(real, dtype=np.float64)
    if real.ndim != 2:
        raise ValueError("reference set must be 2-D")
    n, d = real.shape
    if n < d + 1:
        raise ValueError(f"need at least {d + 1} reference points in {d} dims, got {n}")
    mu = real.mean(axis=0)
    cov = _population_cov(real)
    if eps_scale:
        cov = cov + (eps_scale * np.trace(cov) / d) * np.eye(d)
    # cholesky alone can slip through an exactly singular matrix when the
    # final pivot rounds to a positive epsilon, so rank-check first
    if np.linalg.matrix_rank(cov) < d:
        raise ValueError("singular covariance matrix")
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ValueError("singular covariance matrix") from None
    pts, single = _as_batch(points)
    white = np.linalg.solve(chol, (pts - mu).T)
    dist = np.sqrt((white * white).sum(axis=0))
    return float(dist[0]) if single else dist


def scott_bandwidth(real) -> float:
    """Isotropic Scott's-rule bandwidth: average marginal standard
    deviation scaled by n^(-1/(d+4))."""
    real = np.asarray(real, dtype=np.float64)
    n, d = real.shape
    sigma = math.sqrt(np.trace(_population_cov(real)) / d)
    if sigma == 0.0:
        raise ValueError("reference set has zero variance")
    return sigma * n ** (-1.0 / (d + 4))


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d2 = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d2, 0.0)


def kde_likelihood(points, real, bandwidth: float | None = None):
    """Gaussian-kernel density at each point, expressed as a score in
    (0, 1]: the density divided by the highest density attained over the
    real points themselves, capped at 1."""
    real = np.asarray(real, dtype=np.float64)
    if real.ndim != 2:
        raise ValueError("reference set must be 2-D")
    h = scott_bandwidth(real) if bandwidth is None else float(bandwidth)
    if h <= 0:
        raise ValueError("bandwidth must be positive")
    pts, single = _as_batch(points)

    def density(x):
        return np.exp(-_sq_dists(x, real) / (2.0 * h * h)).mean(axis=1)

    scores = np.minimum(density(pts) / density(real).max(), 1.0)
    return float(scores[0]) if single else scores


def isolation_forest_score(points, reference, n_trees: int = 100,
                           subsample: int = 256, seed: int = 0):
    """Isolation-forest normality score (higher = more normal), forest
    fitted on the reference points and evaluated on ``points``."""
    if n_trees < 50:
        raise ValueError(f"n_trees must be at least 50, got {n_trees}")
    reference = np.asarray(reference, dtype=np.float64)
    forest = IsolationForest(
        n_estimators=n_trees,
        max_samples=min(int(subsample), reference.shape[0]),
        random_state=seed,
    )
    forest.fit(reference)
    pts, single = _as_batch(points)
    scores = forest.score_samples(pts)
    return float(scores[0]) if single else scores


def rvc_entropy(real, fake, k_neighbors: int = 10) -> float:
    """Mean binary entropy, over fake points, of the real fraction among
    each fake point's k nearest neighbors in the pooled labeled set
    (itself excluded).  1 means the neighborhood is an even real/fake mix,
    0 means it is pure."""
    real = np.asarray(real, dtype=np.float64)
    fake = np.asarray(fake, dtype=np.float64)
    k = int(k_neighbors)
    if real.shape[0] < k or fake.shape[0] < k:
        raise ValueError(f"need at least {k} points per group")
    pool = np.vstack([real, fake])
    d2 = _sq_dists(fake, pool)
    for j in range(fake.shape[0]):
        d2[j, real.shape[0] + j] = np.inf
    nn = np.argsort(d2, axis=1, kind="stable")[:, :k]
    total = 0.0
    for row in nn:
        p = float((row < real.shape[0]).mean())
        if 0.0 < p < 1.0:
            total += -(p * math.log2(p) + (1 - p) * math.log2(1 - p))
    return total / fake.shape[0]


def knn_graph_degrees(real, fake, k: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Node degrees in the undirected kNN graph over the pooled points
    (edge when either endpoint picks the other), split back into the real
    and fake groups.  Distance ties resolve toward the lower index."""
    real = np.asarray(real, dtype=np.float64)
    fake = np.asarray(fake, dtype=np.float64)
    pool = np.vstack([real, fake])
    n = pool.shape[0]
    if not 0 < k < n:
        raise ValueError(f"k must be in (0, {n}), got {k}")
    d2 = _sq_dists(pool, pool)
    np.fill_diagonal(d2, np.inf)
    nn = np.argsort(d2, axis=1, kind="stable")[:, :k]
    adj = np.zeros((n, n), dtype=bool)
    adj[np.repeat(np.arange(n), k), nn.reshape(-1)] = True
    adj |= adj.T
    deg = adj.sum(axis=1)
    return deg[: real.shape[0]], deg[real.shape[0]:]


def knn_graph_degree(real, fake, k: int = 10) -> float:
    """Mean undirected kNN-graph degree over the fake nodes."""
    _, deg_fake = knn_graph_degrees(real, fake, k)
    if deg_fake.size == 0:
        raise ValueError("no fake points")
    return float(deg_fake.mean())


# ------------------------------------------------------- groups and export

def group_centroid_distances(groups: dict) -> tuple[list, np.ndarray]:
    """Pairwise L2 distances between group mean embeddings, in the
    insertion order of ``groups``."""
    labels = list(groups)
    if not labels:
        raise ValueError("no groups")
    means = np.stack([np.asarray(groups[g], dtype=np.float64).mean(axis=0) for g in labels])
    diff = means[:, None, :] - means[None, :, :]
    return labels, np.sqrt((diff * diff).sum(axis=-1))


def pca_projection(points, n_components: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Centered SVD projection onto the leading components.

    Component signs follow the convention that each component's
    largest-magnitude loading is positive, so results are reproducible.
    Returns (coords, components); coords are zero-padded when the data
    carries fewer than ``n_components`` directions.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need a 2-D array with at least two points")
    centered = x - x.mean(axis=0)
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    take = min(n_components, vt.shape[0])
    vt = vt[:take]
    flip = np.sign(vt[np.arange(take), np.argmax(np.abs(vt), axis=1)])
    flip[flip == 0] = 1.0
    vt = vt * flip[:, None]
    coords = centered @ vt.T
    if take < n_components:
        coords = np.hstack([coords, np.zeros((x.shape[0], n_components - take))])
    return coords, vt


def export_pca_csv(path, groups: dict) -> None:
    """Write pooled 3-component PCA coordinates as x,y,z,group csv rows."""
    labels = list(groups)
    arrays = [np.asarray(groups[g], dtype=np.float64) for g in labels]
    coords, _ = pca_projection(np.vstack(arrays), n_components=3)
    lines = ["x,y,z,group"]
    row = 0
    for label, arr in zip(labels, arrays):
        for _ in range(arr.shape[0]):
            x, y, z = coords[row]
            lines.append(f"{x:.17g},{y:.17g},{z:.17g},{label}")
            row += 1
    Path(path).write_text("\n".join(lines) + "\n")


# ------------------------------------------------------------------ report

def _mean_var(values) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "var": float(arr.var())}


def stealth_report(real_emb, fake_emb, seed: int, k_neighbors: int = 10,
                   graph_k: int = 10, n_trees: int = 100, subsample: int = 256,
                   bandwidth: float | None = None) -> dict:
    """Full stealth battery over real and fake user embeddings.

    Every distribution metric is reported for both groups (real scored
    against themselves as the in-distribution baseline); entropy is a
    property of the fake set alone.  One-class SVM and GNN-detector
    columns are part of the table layout downstream but intentionally
    absent here.
    """
    real = np.asarray(real_emb, dtype=np.float64)
    fake = np.asarray(fake_emb, dtype=np.float64)
    if real.ndim != 2 or fake.ndim != 2 or real.shape[1] != fake.shape[1]:
        raise ValueError("real and fake embeddings must be 2-D with equal width")
    if fake.shape[0] == 0:
        raise ValueError("stealth report needs at least one fake row")
    # small injections can undercut the defaults (9 fakes vs k=10), so the
    # neighbor counts clamp to what the groups support; the report records
    # the values actually used
    k_eff = min(int(k_neighbors), real.shape[0], fake.shape[0])
    graph_k_eff = min(int(graph_k), real.shape[0] + fake.shape[0] - 1)
    deg_real, deg_fake = knn_graph_degrees(real, fake, graph_k_eff)
    metrics = {
        "mahalanobis": {
            "real": _mean_var(mahalanobis(real, real)),
            "fake": _mean_var(mahalanobis(fake, real)),
        },
        "kde_likelihood": {
            "real": _mean_var(kde_likelihood(real, real, bandwidth)),
            "fake": _mean_var(kde_likelihood(fake, real, bandwidth)),
        },
        "isolation_forest": {
            "real": _mean_var(isolation_forest_score(real, real, n_trees, subsample, seed)),
            "fake": _mean_var(isolation_forest_score(fake, real, n_trees, subsample, seed)),
        },
        "knn_degree": {
            "real": _mean_var(deg_real),
            "fake": _mean_var(deg_fake),
        },
    }
    labels, dists = group_centroid_distances({"real": real, "fake": fake})

    def finite_or_none(x: float):
        return x if math.isfinite(x) else None

    return {
        "kind": STEALTH_KIND,
        "schema_version": REPORT_SCHEMA,
        "n_real": int(real.shape[0]),
        "n_fake": int(fake.shape[0]),
        "k_neighbors": k_eff,
        "graph_k": graph_k_eff,
        "metrics": metrics,
        "rvc_entropy": rvc_entropy(real, fake, k_eff),
        "centroid_distances": {"labels": labels, "matrix": dists.tolist()},
        "logdet_covariance": {
            "real": finite_or_none(logdet_covariance(real)),
            "fake": finite_or_none(logdet_covariance(fake)),
        },
        "absent_metrics": ["oc_svm_score", "gad_score"],
    }


def write_report(path, report: dict) -> None:
    write_json(path, report)


def read_report(path, expected_kind: str) -> dict:
    obj = read_json(path)
    if obj.get("kind") != expected_kind:
        raise ValueError(f"{path}: expected a {expected_kind}, found {obj.get('kind')!r}")
    if obj.get("schema_version") != REPORT_SCHEMA:
        raise ValueError(
            f"{path}: unsupported schema_version {obj.get('schema_version')!r}"
        )
    return obj
