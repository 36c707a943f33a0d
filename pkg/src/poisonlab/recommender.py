"""Collaborative embedding pretraining.

Pairwise BPR ranking plus alignment/uniformity regularization over a
(optionally graph-propagated) embedding table. The same trainer serves
three roles: the clean victim, the retrained poisoned victim, and the
attacker's surrogate fit on a partial view of the interactions. The
trained table also supplies the generator's latent pool and the
conditioning vectors for targeted generation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .data import Dataset, DataError, RunLog, TargetSet
from .geometry import gather_rows, normalize_rows, pairwise_sq_dists
from .seeding import stream
from .serialize import load_checkpoint, save_checkpoint


@dataclass(frozen=True)
class RecommenderConfig:
    d: int = 64
    layers: int = 2
    lr: float = 0.005
    batch_size: int = 64
    epochs: int = 30
    lam_reg: float = 1e-4
    lam_au: float = 0.1
    model: str = "lightgcn"

    def __post_init__(self):
        if self.d <= 0:
            raise ValueError(f"config.d must be positive, got {self.d}")
        if self.layers < 0:
            raise ValueError(f"config.layers must be >= 0, got {self.layers}")
        if self.model not in ("mf", "lightgcn"):
            raise ValueError(f"config.model must be mf|lightgcn, got {self.model!r}")

    @property
    def effective_layers(self) -> int:
        return 0 if self.model == "mf" else self.layers


@dataclass(frozen=True)
class EmbeddingTable:
    """Frozen user and item embeddings (M x d and N x d)."""

    user: np.ndarray
    item: np.ndarray

    def __post_init__(self):
        u = np.ascontiguousarray(self.user, dtype=np.float64)
        v = np.ascontiguousarray(self.item, dtype=np.float64)
        if u.ndim != 2 or v.ndim != 2 or u.shape[1] != v.shape[1]:
            raise dc.ShapeError(f"embedding shapes {u.shape} and {v.shape} do not share a dimension")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise dc.NonFiniteError("embedding table contains non-finite values")
        u.flags.writeable = False
        v.flags.writeable = False
        object.__setattr__(self, "user", u)
        object.__setattr__(self, "item", v)

    @property
    def d(self) -> int:
        return self.user.shape[1]


class TrainingDiverged(RuntimeError):
    """Raised when a loss goes non-finite; carries the last finite state."""

    def __init__(self, msg: str, table: EmbeddingTable):
        super().__init__(msg)
        self.table = table


# -------------------------------------------------------------- propagation

@dataclass(frozen=True)
class NormalizedGraph:
    """Symmetric-normalized bipartite adjacency over M+N nodes, dense."""

    a_hat: np.ndarray
    n_users: int
    n_items: int

    def tensor(self) -> dc.Tensor:
        return dc.Tensor(self.a_hat)


def build_graph(train: Dataset) -> NormalizedGraph:
    m, n = train.n_users, train.n_items
    deg = np.zeros(m + n, dtype=np.float64)
    users = train.interactions[:, 0]
    items = train.interactions[:, 1] + m
    np.add.at(deg, users, 1.0)
    np.add.at(deg, items, 1.0)
    w = 1.0 / np.sqrt(deg[users] * deg[items])
    a_hat = np.zeros((m + n, m + n), dtype=np.float64)
    a_hat[users, items] = w
    a_hat[items, users] = w
    a_hat.flags.writeable = False
    return NormalizedGraph(a_hat, m, n)


def propagate_tensors(user_emb, item_emb, graph: NormalizedGraph, layers: int):
    """Mean of layer 0..layers embeddings under repeated A_hat multiplication."""
    if layers == 0:
        return user_emb, item_emb
    m = graph.n_users
    a = graph.tensor()
    x = dc.concat([user_emb, item_emb], axis=0)
    acc, cur = x, x
    for _ in range(layers):
        cur = dc.matmul(a, cur)
        acc = dc.add(acc, cur)
    out = dc.scale(acc, 1.0 / (layers + 1))
    total = m + graph.n_items
    return dc.slice_axis(out, 0, 0, m), dc.slice_axis(out, 0, m, total)


def propagate(table: EmbeddingTable, graph: NormalizedGraph, layers: int) -> EmbeddingTable:
    if layers == 0:
        return table
    if graph.n_users != table.user.shape[0] or graph.n_items != table.item.shape[0]:
        raise dc.ShapeError("graph was built for a different M, N")
    x = np.vstack([table.user, table.item])
    acc = x.copy()
    cur = x
    for _ in range(layers):
        cur = graph.a_hat @ cur
        acc = acc + cur
    out = acc * (1.0 / (layers + 1))
    return EmbeddingTable(out[:graph.n_users], out[graph.n_users:])


# ------------------------------------------------------------------- losses

def bpr_loss(user_emb, item_emb, triples, lam_reg: float) -> dc.Tensor:
    """Mean -ln sigma(y_ui - y_uj) over (u, i, j) triples, plus L2 on the
    batch's embedding rows scaled by lam_reg (per-triple normalized)."""
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    m = user_emb.shape[0]
    n = item_emb.shape[0]
    u = gather_rows(user_emb, triples[:, 0], m)
    i = gather_rows(item_emb, triples[:, 1], n)
    j = gather_rows(item_emb, triples[:, 2], n)
    diff = dc.sub(dc.tensor_sum(dc.mul(u, i), axis=1), dc.tensor_sum(dc.mul(u, j), axis=1))
    rank = dc.scale(dc.tensor_mean(dc.log(dc.sigmoid(diff))), -1.0)
    if lam_reg == 0.0:
        return rank
    reg = dc.add(dc.add(dc.l2norm_sq(u), dc.l2norm_sq(i)), dc.l2norm_sq(j))
    return dc.add(rank, dc.scale(reg, lam_reg / triples.shape[0]))


def align_loss(user_vecs, item_vecs) -> dc.Tensor:
    """Mean squared distance between L2-normalized positive pairs."""
    fu = normalize_rows(user_vecs)
    fi = normalize_rows(item_vecs)
    return dc.tensor_mean(dc.l2norm_sq(dc.sub(fu, fi), axis=1))


def _uniformity_side(vecs) -> dc.Tensor:
    if vecs.shape[0] < 2:
        return dc.Tensor(0.0)
    sq = pairwise_sq_dists(normalize_rows(vecs))
    return dc.scale(dc.log(dc.tensor_mean(dc.exp(dc.scale(sq, -2.0)))), 0.5)


def uniform_loss(user_vecs, item_vecs) -> dc.Tensor:
    """log E exp(-2 |f-f'|^2) / 2 over in-batch ordered distinct pairs,
    summed for the user side and the item side."""
    return dc.add(_uniformity_side(user_vecs), _uniformity_side(item_vecs))


def pretrain_loss(user_emb, item_emb, triples, lam_reg: float, lam_au: float) -> dc.Tensor:
    """BPR plus lam_au * (alignment + uniformity) on the batch positives.

    lam_au = 0 skips the extra terms entirely, so such a run is
    arithmetically identical to plain BPR.
    """
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    loss = bpr_loss(user_emb, item_emb, triples, lam_reg)
    if lam_au == 0.0 or triples.shape[0] < 2:
        return loss
    u = gather_rows(user_emb, triples[:, 0], user_emb.shape[0])
    i = gather_rows(item_emb, triples[:, 1], item_emb.shape[0])
    au = dc.add(align_loss(u, i), uniform_loss(u, i))
    return dc.add(loss, dc.scale(au, lam_au))


# ----------------------------------------------------------------- training

def _negative_samples(rng, pos_sets, users, n_items) -> np.ndarray:
    out = np.empty(users.shape[0], dtype=np.int64)
    for k, u in enumerate(users):
        pos = pos_sets[u]
        if len(pos) >= n_items:
            raise DataError(f"user {u} interacted with every item; no negatives exist")
        j = int(rng.integers(n_items))
        while j in pos:
            j = int(rng.integers(n_items))
        out[k] = j
    return out


def pretrain(config: RecommenderConfig, train: Dataset, seed: int,
             log: RunLog | None = None) -> EmbeddingTable:
    """Mini-batch Adam on the pretraining loss; returns propagated embeddings.

    The per-epoch mean loss goes to the run log. If any batch turns
    non-finite the run aborts with the last epoch's finite state attached.
    """
    if train.n_interactions == 0:
        raise DataError("cannot pretrain on an empty dataset")
    rng = stream(seed, "pretrain")
    m, n = train.n_users, train.n_items
    user_p = dc.Parameter(0.1 * rng.standard_normal((m, config.d)), name="user_embeddings")
    item_p = dc.Parameter(0.1 * rng.standard_normal((n, config.d)), name="item_embeddings")
    layers = config.effective_layers
    graph = build_graph(train) if layers > 0 else None
    opt = dc.Adam([user_p, item_p], lr=config.lr)
    inter = train.interactions
    pos_sets = [set(items.tolist()) for items in train.user_items()]
    bs = min(config.batch_size, inter.shape[0])
    last_good = (user_p.data.copy(), item_p.data.copy())

    def final_table(user, item):
        table = EmbeddingTable(user, item)
        return propagate(table, graph, layers) if layers > 0 else table

    for epoch in range(config.epochs):
        order = rng.permutation(inter.shape[0])
        losses = []
        for start in range(0, inter.shape[0] - bs + 1, bs):
            batch = inter[order[start:start + bs]]
            negs = _negative_samples(rng, pos_sets, batch[:, 0], n)
            triples = np.column_stack([batch, negs])
            opt.zero_grad()
            try:
                with dc.Tape() as tape:
                    if layers > 0:
                        u_e, i_e = propagate_tensors(user_p, item_p, graph, layers)
                    else:
                        u_e, i_e = user_p, item_p
                    loss = pretrain_loss(u_e, i_e, triples, config.lam_reg, config.lam_au)
                dc.backward(loss, tape)
            except dc.NonFiniteError as exc:
                raise TrainingDiverged(
                    f"pretrain diverged at epoch {epoch + 1}: {exc}",
                    final_table(*last_good)) from exc
            opt.step()
            losses.append(float(loss.data))
        last_good = (user_p.data.copy(), item_p.data.copy())
        if log is not None:
            log.note(f"pretrain epoch {epoch + 1}: loss={np.mean(losses):.6f}")
    return final_table(user_p.data, item_p.data)


# ---------------------------------------------------------------- inference

def top_k(table: EmbeddingTable, user: int, k: int, exclude=()) -> np.ndarray:
    """k best items for ``user`` by dot-product score, skipping ``exclude``;
    score ties resolve toward the lower item index."""
    scores = table.item @ table.user[user]
    order = np.lexsort((np.arange(scores.shape[0]), -scores))
    banned = {int(i) for i in np.asarray(exclude, dtype=np.int64).reshape(-1)}
    if banned:
        order = order[[int(i) not in banned for i in order]]
    return order[:k].copy()


def high_activity_pool(table: EmbeddingTable, train: Dataset,
                       fraction: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Indices and embeddings of the most active users (top ``fraction``
    by training interaction count, at least one user)."""
    counts = np.bincount(train.interactions[:, 0], minlength=train.n_users)
    order = np.lexsort((np.arange(train.n_users), -counts))
    take = max(1, math.ceil(fraction * train.n_users))
    pool = np.sort(order[:take])
    return pool, table.user[pool].copy()


@dataclass(frozen=True)
class ConditionSet:
    """Sampled (user, item) conditioning pairs with their embeddings."""

    users: np.ndarray
    items: np.ndarray
    z_user: np.ndarray
    z_item: np.ndarray


def select_conditions(table: EmbeddingTable, train: Dataset, targets: TargetSet,
                      n_pairs: int, seed: int) -> ConditionSet:
    """For each request: a uniformly drawn target item plus a uniformly
    drawn user who interacted with it. A target nobody interacted with
    falls back to the user whose embedding is nearest the item's by
    cosine similarity.
    """
    rng = stream(seed, "conditions")
    item_users: dict[int, np.ndarray] = {}
    for t in targets.items:
        mask = train.interactions[:, 1] == t
        item_users[int(t)] = np.unique(train.interactions[mask, 0])
    user_norms = np.sqrt((table.user ** 2).sum(axis=1))
    users = np.empty(n_pairs, dtype=np.int64)
    items = np.empty(n_pairs, dtype=np.int64)
    for k in range(n_pairs):
        v = int(targets.items[rng.integers(len(targets.items))])
        cands = item_users[v]
        if cands.size:
            u = int(cands[rng.integers(cands.size)])
        else:
            zv = table.item[v]
            denom = user_norms * np.sqrt((zv ** 2).sum()) + 1e-12
            u = int(np.argmax(table.user @ zv / denom))
        users[k], items[k] = u, v
    return ConditionSet(users, items, table.user[users].copy(), table.item[items].copy())


# -------------------------------------------------------------- persistence

def save_embeddings(path, table: EmbeddingTable, model: str, seed: int) -> None:
    header = {
        "kind": "embeddings",
        "M": int(table.user.shape[0]),
        "N": int(table.item.shape[0]),
        "d": int(table.d),
        "model": model,
        "seed": int(seed),
    }
    save_checkpoint(path, header, {"user": table.user, "item": table.item})


def load_embeddings(path) -> tuple[EmbeddingTable, dict]:
    header, arrays = load_checkpoint(path)
    if header.get("kind") != "embeddings":
        raise ValueError(f"{path}: not an embedding checkpoint")
    table = EmbeddingTable(arrays["user"], arrays["item"])
    if table.user.shape != (header["M"], header["d"]) or table.item.shape != (header["N"], header["d"]):
        raise ValueError(f"{path}: header does not match array shapes")
    return table, header
