"""Interaction data: ingestion, splits, attacker views, target selection,
and fake-profile injection.

A ``Dataset`` is an immutable binary interaction set over dense 0-based
user/item indices, with the raw-id mapping kept alongside so views and
exports stay joinable. Interactions are stored sorted by (user, item),
deduplicated, and validated on construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .seeding import stream


class DataError(ValueError):
    """Malformed input data or a violated data-layer contract."""


def round_half_up(x: float) -> int:
    """Commercial rounding; python's round() banker-rounds .5 cases."""
    return int(math.floor(x + 0.5))


class RunLog:
    """Plain-text run log collected in memory and flushed to a file."""

    def __init__(self):
        self.lines: list[str] = []

    def note(self, msg: str) -> None:
        self.lines.append(msg)

    def write(self, path) -> None:
        Path(path).write_text("".join(line + "\n" for line in self.lines), "utf-8")

    def __str__(self) -> str:
        return "\n".join(self.lines)


class Dataset:
    """Binary user-item interactions with dense indices.

    ``interactions`` is an (n, 2) int64 array of (user_index, item_index)
    rows, unique and sorted. ``user_ids[k]`` / ``item_ids[k]`` give the raw
    id behind dense index k; synthetic data uses identity tables.
    """

    def __init__(self, interactions, user_ids, item_ids):
        arr = np.asarray(interactions, dtype=np.int64).reshape(-1, 2)
        self.user_ids = list(user_ids)
        self.item_ids = list(item_ids)
        if arr.shape[0]:
            if arr.min() < 0 or arr[:, 0].max() >= len(self.user_ids) or arr[:, 1].max() >= len(self.item_ids):
                raise DataError("interaction index out of range for the id tables")
        order = np.lexsort((arr[:, 1], arr[:, 0]))
        arr = arr[order]
        if arr.shape[0] > 1 and np.any(np.all(arr[1:] == arr[:-1], axis=1)):
            raise DataError("duplicate (user, item) pairs")
        arr.flags.writeable = False
        self.interactions = arr
        self._user_items = None

    @classmethod
    def from_pairs(cls, pairs, n_users: int, n_items: int) -> "Dataset":
        return cls(pairs, range(n_users), range(n_items))

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def n_interactions(self) -> int:
        return int(self.interactions.shape[0])

    def interaction_set(self) -> set[tuple[int, int]]:
        return {(int(u), int(i)) for u, i in self.interactions}

    def user_items(self) -> list[np.ndarray]:
        """Per-user sorted item-index arrays (cached)."""
        if self._user_items is None:
            lists = [[] for _ in range(self.n_users)]
            for u, i in self.interactions:
                lists[u].append(i)
            self._user_items = [np.asarray(l, dtype=np.int64) for l in lists]
        return self._user_items

    def to_dense(self) -> np.ndarray:
        mat = np.zeros((self.n_users, self.n_items), dtype=np.float64)
        mat[self.interactions[:, 0], self.interactions[:, 1]] = 1.0
        return mat

    def subset(self, rows: np.ndarray) -> "Dataset":
        """New Dataset over the same id tables holding only ``rows``."""
        return Dataset(rows, self.user_ids, self.item_ids)

    def __repr__(self):
        return f"Dataset(users={self.n_users}, items={self.n_items}, interactions={self.n_interactions})"


# ------------------------------------------------------------------ loading

def _parse_line(line: str, lineno: int, path) -> tuple[str, str, float | None]:
    fields = line.rstrip("\n").split("\t")
    if len(fields) == 1:
        fields = line.split()
    if not 2 <= len(fields) <= 4:
        raise DataError(f"{path}:{lineno}: expected 2-4 tab-separated fields, got {len(fields)}")
    user, item = fields[0], fields[1]
    rating = None
    if len(fields) >= 3:
        try:
            rating = float(fields[2])
        except ValueError:
            raise DataError(f"{path}:{lineno}: rating {fields[2]!r} is not a number") from None
    if not user or not item:
        raise DataError(f"{path}:{lineno}: empty user or item id")
    return user, item, rating


def _sorted_ids(raw: set[str]) -> list:
    try:
        return sorted(int(r) for r in raw)
    except ValueError:
        return sorted(raw)


def load_interactions(path, fmt: str = "tsv", min_rating: float | None = None) -> Dataset:
    """Load a tab-separated interaction log into a binarized Dataset.

    Lines are ``user⟨TAB⟩item[⟨TAB⟩rating[⟨TAB⟩timestamp]]``. Every kept
    line counts as one interaction regardless of rating value; when
    ``min_rating`` is set, lines rated below it are dropped before
    binarization. Duplicates collapse to one interaction.
    """
    if fmt != "tsv":
        raise DataError(f"unsupported format {fmt!r}")
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    raw_pairs: set[tuple[str, str]] = set()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            user, item, rating = _parse_line(line, lineno, path)
            if min_rating is not None and rating is not None and rating < min_rating:
                continue
            raw_pairs.add((user, item))
    if not raw_pairs:
        raise DataError(f"{path}: no interactions")
    user_ids = _sorted_ids({u for u, _ in raw_pairs})
    item_ids = _sorted_ids({i for _, i in raw_pairs})
    u_index = {str(u): k for k, u in enumerate(user_ids)}
    i_index = {str(i): k for k, i in enumerate(item_ids)}
    pairs = np.array([[u_index[u], i_index[i]] for u, i in raw_pairs], dtype=np.int64)
    return Dataset(pairs, user_ids, item_ids)


def export_tsv(d: Dataset, path) -> None:
    """Write raw-id interaction pairs; reloading reproduces the dataset."""
    with open(path, "w", encoding="utf-8") as f:
        for u, i in d.interactions:
            f.write(f"{d.user_ids[u]}\t{d.item_ids[i]}\n")


def summarize(d: Dataset) -> dict:
    n = d.n_interactions
    cells = d.n_users * d.n_items
    return {
        "users": d.n_users,
        "items": d.n_items,
        "interactions": n,
        "avg_interactions_per_user": n / d.n_users,
        "avg_interactions_per_item": n / d.n_items,
        "sparsity_pct": 100.0 * (1.0 - n / cells),
    }


def format_summary(d: Dataset) -> str:
    """One-line dataset statistics in the usual survey-table shape."""
    s = summarize(d)
    return (f"users={s['users']} items={s['items']} interactions={s['interactions']} "
            f"avg_int={s['avg_interactions_per_item']:.2f} sparsity={s['sparsity_pct']:.2f}%")


# ------------------------------------------------------------------ splits

@dataclass(frozen=True)
class Split:
    train: Dataset
    validation: Dataset
    test: Dataset
    reassigned: int


def split_dataset(d: Dataset, seed: int, log: RunLog | None = None) -> Split:
    """Seeded global 8:1:1 shuffle split.

    Users that would end up with zero training interactions get all their
    interactions reassigned to train, so every user stays trainable; each
    reassignment is recorded in the run log.
    """
    if d.n_interactions < 10:
        raise DataError(f"need at least 10 interactions to split, have {d.n_interactions}")
    rng = stream(seed, "split")
    n = d.n_interactions
    order = rng.permutation(n)
    n_train = round_half_up(0.8 * n)
    n_val = round_half_up(0.1 * n)
    bucket = np.zeros(n, dtype=np.int8)     # 0 train, 1 val, 2 test
    bucket[order[n_train:n_train + n_val]] = 1
    bucket[order[n_train + n_val:]] = 2
    reassigned = 0
    train_users = set(d.interactions[bucket == 0, 0].tolist())
    for u in range(d.n_users):
        if u not in train_users:
            mask = d.interactions[:, 0] == u
            moved = int(np.count_nonzero(mask & (bucket != 0)))
            bucket[mask] = 0
            reassigned += moved
            if log is not None:
                log.note(f"split: user {d.user_ids[u]} reassigned {moved} interactions to train")
    parts = [d.subset(d.interactions[bucket == b]) for b in (0, 1, 2)]
    if log is not None:
        log.note(f"split: train={parts[0].n_interactions} val={parts[1].n_interactions} "
                 f"test={parts[2].n_interactions} reassigned={reassigned}")
    return Split(parts[0], parts[1], parts[2], reassigned)


def sample_attacker_view(d: Dataset, fraction: float, seed: int) -> Dataset:
    """Uniform interaction-level subsample, without replacement.

    The view keeps the full id tables, so users or items that lose all
    interactions simply have empty rows; their global indices stay valid.
    """
    if not 0.0 < fraction <= 1.0:
        raise DataError(f"attacker-view fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return d
    rng = stream(seed, "attacker-view")
    k = round_half_up(fraction * d.n_interactions)
    chosen = rng.choice(d.n_interactions, size=k, replace=False)
    return d.subset(d.interactions[np.sort(chosen)])


# --------------------------------------------------------------- injection

def activity_cap(train: Dataset) -> int:
    """Average training interactions per user, rounded half up."""
    return round_half_up(train.n_interactions / train.n_users)


@dataclass(frozen=True)
class PoisonedMatrix:
    """Training matrix with fake rows appended below the real users."""

    base: Dataset
    fake_rows: np.ndarray    # (M_a, N) binary

    @property
    def n_real(self) -> int:
        return self.base.n_users

    @property
    def n_fake(self) -> int:
        return int(self.fake_rows.shape[0])

    @property
    def n_users(self) -> int:
        return self.n_real + self.n_fake

    @property
    def n_items(self) -> int:
        return self.base.n_items

    def to_dense(self) -> np.ndarray:
        return np.vstack([self.base.to_dense(), self.fake_rows.astype(np.float64)])

    def user_items(self) -> list[np.ndarray]:
        """Per-user positives over real then fake rows."""
        rows = list(self.base.user_items())
        for r in self.fake_rows:
            rows.append(np.flatnonzero(r).astype(np.int64))
        return rows


def inject_profiles(train: Dataset, fake_rows, cap: int | None = None) -> PoisonedMatrix:
    """Append fake binary rows to the training matrix.

    Rows must be 0/1, width N, with at most ``cap`` nonzeros each (cap
    defaults to the real users' average activity). The base data is
    referenced, never copied or modified.
    """
    rows = np.asarray(fake_rows, dtype=np.float64)
    if rows.size == 0:
        rows = rows.reshape(0, train.n_items)
    if rows.ndim != 2 or rows.shape[1] != train.n_items:
        raise DataError(f"fake rows have shape {rows.shape}, expected (*, {train.n_items})")
    if not np.all((rows == 0.0) | (rows == 1.0)):
        raise DataError("fake rows must be binary")
    if cap is None:
        cap = activity_cap(train)
    counts = rows.sum(axis=1).astype(np.int64)
    over = np.flatnonzero(counts > cap)
    if over.size:
        raise DataError(f"fake row {int(over[0])} has {int(counts[over[0]])} interactions, cap is {cap}")
    rows = rows.copy()
    rows.flags.writeable = False
    return PoisonedMatrix(train, rows)


# ----------------------------------------------------------------- targets

@dataclass(frozen=True)
class TargetSet:
    items: np.ndarray        # dense item indices
    popularity: str          # "popular" | "unpopular"

    def __post_init__(self):
        arr = np.asarray(self.items, dtype=np.int64)
        arr.flags.writeable = False
        object.__setattr__(self, "items", arr)


def select_targets(d: Dataset, k: int, popularity: str, seed: int,
                   log: RunLog | None = None) -> TargetSet:
    """Sample k target items from the top or bottom popularity decile.

    Items are ranked by training interaction count (ties broken by index);
    the pool is the extreme 10% of that ranking, widened to k if needed.
    Zero-interaction items are ordinary members of the unpopular pool.
    """
    if popularity not in ("popular", "unpopular"):
        raise DataError(f"popularity must be popular|unpopular, got {popularity!r}")
    if not 0 < k <= d.n_items:
        raise DataError(f"cannot select {k} targets from {d.n_items} items")
    counts = np.bincount(d.interactions[:, 1], minlength=d.n_items)
    ranked = np.lexsort((np.arange(d.n_items), counts))     # ascending popularity
    pool_size = max(math.ceil(d.n_items / 10), k)
    pool = ranked[:pool_size] if popularity == "unpopular" else ranked[-pool_size:]
    rng = stream(seed, "targets")
    items = np.sort(rng.choice(pool, size=k, replace=False))
    if log is not None:
        log.note(f"targets ({popularity}): {items.tolist()}")
    return TargetSet(items, popularity)


# --------------------------------------------------------------- synthetic

def synthetic_two_block(n_users: int, n_items: int, seed: int,
                        p_in: float = 0.15, p_out: float = 0.02) -> Dataset:
    """Planted 2-community dataset: users and items split into halves,
    with dense interactions inside matching halves and sparse across."""
    rng = stream(seed, "synthetic")
    user_block = (np.arange(n_users) >= n_users // 2).astype(np.int64)
    item_block = (np.arange(n_items) >= n_items // 2).astype(np.int64)
    probs = np.where(user_block[:, None] == item_block[None, :], p_in, p_out)
    mat = rng.random((n_users, n_items)) < probs
    for u in range(n_users):             # nobody starts cold
        if not mat[u].any():
            own = np.flatnonzero(item_block == user_block[u])
            mat[u, rng.choice(own)] = True
    pairs = np.argwhere(mat)
    return Dataset.from_pairs(pairs, n_users, n_items)
