"""Projection of dense latent vectors into sparse binary rating rows.

A sampled latent is scored against the item embedding table, the number of
interactions is drawn from a Poisson distribution, and the highest-scoring
items above a threshold form the active set.  Target items are switched on
afterwards, so every produced row promotes the full target set.  The row
budget never exceeds n_max: when the union would overflow, the
lowest-scoring non-target items are dropped first.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DataError
from .diffcore import ShapeError
from .serialize import read_json, write_json

PROFILES_KIND = "fake-profiles"
PROFILES_SCHEMA = 1


@dataclass(frozen=True)
class ProjectionConfig:
    """Knobs for turning one latent vector into one rating row.

    delta is compared against per-row standardized scores, so the default
    0.0 keeps items scoring above the row mean; -inf disables the
    threshold entirely.
    """

    lam_pois: float
    n_max: int
    delta: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.lam_pois) or self.lam_pois <= 0:
            raise ValueError("lam_pois must be positive and finite")
        if int(self.n_max) != self.n_max or self.n_max < 0:
            raise ValueError("n_max must be a non-negative integer")
        if np.isnan(self.delta):
            raise ValueError("delta must not be NaN")


def default_lam_pois(train, n_targets: int) -> float:
    """Poisson mean chosen so target items plus fillers center on the
    average real-user training activity.  Falls back to 1.0 when the
    target set alone already exceeds that activity."""
    lam = train.n_interactions / train.n_users - n_targets
    return float(lam) if lam > 0 else 1.0


def score_items(z, item_emb) -> np.ndarray:
    """Relevance of every item to the latent z, by inner product."""
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    emb = np.asarray(item_emb, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[1] != z.shape[0]:
        raise ShapeError(
            f"item matrix {emb.shape} incompatible with latent of width {z.shape[0]}"
        )
    return emb @ z


def standardize_scores(s) -> np.ndarray:
    """Per-row z-score; an all-equal score vector standardizes to zeros."""
    s = np.asarray(s, dtype=np.float64)
    sd = float(s.std())
    if sd == 0.0:
        return np.zeros_like(s)
    return (s - s.mean()) / sd


def draw_count(lam_pois: float, n_items: int, n_max: int, rng) -> int:
    """Poisson draw of the row activity, clamped to the catalogue and cap."""
    if lam_pois <= 0:
        raise ValueError("lam_pois must be positive")
    rng = np.random.default_rng(rng)
    n = int(rng.poisson(lam_pois))
    return min(n, int(n_items), int(n_max))


def select_active(s, n: int, delta: float) -> np.ndarray:
    """Indices of the n best-scoring items that clear delta, sorted ascending.

    Ties in score break toward the lower item index.
    """
    s = np.asarray(s, dtype=np.float64)
    n = int(n)
    if n < 0 or n > s.shape[0]:
        raise ValueError(f"n={n} outside [0, {s.shape[0]}]")
    order = np.lexsort((np.arange(s.shape[0]), -s))
    top = order[:n]
    return np.sort(top[s[top] >= delta]).astype(np.int64)


def binarize(active, targets, n_items: int) -> np.ndarray:
    """Binary row with ones exactly on the union of active and target items."""
    row = np.zeros(int(n_items), dtype=np.int64)
    idx = np.concatenate([
        np.asarray(active, dtype=np.int64).reshape(-1),
        np.asarray(targets, dtype=np.int64).reshape(-1),
    ])
    if idx.size and (idx.min() < 0 or idx.max() >= n_items):
        raise ValueError("item index out of range")
    row[idx] = 1
    return row


@dataclass(frozen=True)
class ProjectedRow:
    """One produced rating row plus the counts behind it.

    active_size is the size of the score-selected set before the target
    union and before any cap trimming; the final activity is the row's
    nonzero count.
    """

    row: np.ndarray
    drawn_n: int
    active_size: int


def project_profile(z, item_emb, config: ProjectionConfig, targets, rng) -> ProjectedRow:
    """Full pipeline from one latent vector to one binary rating row.

    Scores are standardized per row before the threshold applies.  If the
    union of active and target items would exceed n_max, the
    lowest-scoring non-target items are dropped (ties drop the higher
    index); targets are never dropped.
    """
    targets = np.unique(np.asarray(targets, dtype=np.int64).reshape(-1))
    if config.n_max < targets.size:
        raise ValueError(f"n_max={config.n_max} cannot hold {targets.size} target items")
    s = standardize_scores(score_items(z, item_emb))
    n_items = s.shape[0]
    if targets.size and (targets.min() < 0 or targets.max() >= n_items):
        raise ValueError("target index out of range")
    rng = np.random.default_rng(rng)
    n = draw_count(config.lam_pois, n_items, config.n_max, rng)
    active = select_active(s, n, config.delta)
    filler = np.setdiff1d(active, targets)
    room = config.n_max - targets.size
    if filler.size > room:
        order = np.lexsort((-filler, s[filler]))
        filler = filler[order[filler.size - room:]]
    row = binarize(filler, targets, n_items)
    row.setflags(write=False)
    return ProjectedRow(row=row, drawn_n=n, active_size=int(active.size))


@dataclass(frozen=True)
class RowProvenance:
    """Where one fake row came from: stream index, conditions, and counts."""

    row_seed: int
    cond_user: int
    cond_item: int
    drawn_n: int
    active_size: int


@dataclass(frozen=True)
class FakeProfileSet:
    """A batch of binary fake rows, all guaranteed to contain the targets."""

    rows: np.ndarray
    target_items: np.ndarray
    provenance: tuple

    def __post_init__(self):
        rows = np.ascontiguousarray(np.asarray(self.rows, dtype=np.int64))
        if rows.ndim != 2:
            raise ShapeError("profile rows must be 2-D")
        if rows.size and not np.isin(rows, (0, 1)).all():
            raise ValueError("profile rows must be binary")
        targets = np.unique(np.asarray(self.target_items, dtype=np.int64).reshape(-1))
        if targets.size and (targets.min() < 0 or targets.max() >= rows.shape[1]):
            raise ValueError("target index out of range")
        if targets.size and rows.shape[0]:
            missing = (rows[:, targets] != 1).any(axis=1)
            if missing.any():
                raise ValueError(f"row {int(np.argmax(missing))} is missing a target item")
        if len(self.provenance) != rows.shape[0]:
            raise ValueError("provenance length must match row count")
        rows.setflags(write=False)
        targets.setflags(write=False)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "target_items", targets)
        object.__setattr__(self, "provenance", tuple(self.provenance))

    @property
    def n_rows(self) -> int:
        return int(self.rows.shape[0])

    @property
    def n_items(self) -> int:
        return int(self.rows.shape[1])


def export_profiles(profiles: FakeProfileSet, item_ids, tsv_path, json_path) -> None:
    """Write the rows as (fake user, raw item id) tsv pairs plus a
    provenance sidecar holding per-row seeds, conditions, and counts."""
    if len(item_ids) != profiles.n_items:
        raise ValueError(
            f"item id table has {len(item_ids)} entries, rows have {profiles.n_items}"
        )
    lines = []
    for k in range(profiles.n_rows):
        for i in np.flatnonzero(profiles.rows[k]):
            lines.append(f"fake_{k}\t{item_ids[int(i)]}")
    Path(tsv_path).write_text("\n".join(lines) + ("\n" if lines else ""))
    meta = {
        "kind": PROFILES_KIND,
        "schema_version": PROFILES_SCHEMA,
        "n_rows": profiles.n_rows,
        "n_items": profiles.n_items,
        "target_items": [int(i) for i in profiles.target_items],
        "rows": [
            {
                "row": k,
                "row_seed": int(p.row_seed),
                "cond_user": int(p.cond_user),
                "cond_item": int(p.cond_item),
                "drawn_n": int(p.drawn_n),
                "active_size": int(p.active_size),
            }
            for k, p in enumerate(profiles.provenance)
        ],
    }
    write_json(json_path, meta)


def load_profiles(tsv_path, json_path, item_ids) -> FakeProfileSet:
    """Rebuild a FakeProfileSet from its tsv export and provenance sidecar."""
    meta = read_json(json_path)
    if meta.get("kind") != PROFILES_KIND:
        raise ValueError(f"{json_path}: not a fake-profiles sidecar")
    if meta.get("schema_version") != PROFILES_SCHEMA:
        raise ValueError(f"{json_path}: unsupported schema_version {meta.get('schema_version')!r}")
    n_rows, n_items = int(meta["n_rows"]), int(meta["n_items"])
    if len(item_ids) != n_items:
        raise ValueError(f"item id table has {len(item_ids)} entries, sidecar says {n_items}")
    index = {raw: i for i, raw in enumerate(item_ids)}
    rows = np.zeros((n_rows, n_items), dtype=np.int64)
    for lineno, line in enumerate(Path(tsv_path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0].startswith("fake_"):
            raise DataError(f"{tsv_path}:{lineno}: malformed profile line")
        try:
            k = int(parts[0][len("fake_"):])
        except ValueError:
            raise DataError(f"{tsv_path}:{lineno}: bad fake user id {parts[0]!r}") from None
        if not 0 <= k < n_rows:
            raise DataError(f"{tsv_path}:{lineno}: fake user {k} out of range")
        if parts[1] not in index:
            raise DataError(f"{tsv_path}:{lineno}: unknown item id {parts[1]!r}")
        rows[k, index[parts[1]]] = 1
    prov = tuple(
        RowProvenance(
            row_seed=int(r["row_seed"]),
            cond_user=int(r["cond_user"]),
            cond_item=int(r["cond_item"]),
            drawn_n=int(r["drawn_n"]),
            active_size=int(r["active_size"]),
        )
        for r in meta["rows"]
    )
    return FakeProfileSet(
        rows=rows,
        target_items=np.asarray(meta["target_items"], dtype=np.int64),
        provenance=prov,
    )
