"""End-to-end poisoning orchestration plus heuristic baselines.

The main pipeline samples the attacker's partial view, pretrains a
surrogate embedding table on it, picks conditioning pairs tied to the
target items, trains the conditional latent generator, then samples and
projects one binary profile per fake user and appends the rows to the
training matrix.  Random and bandwagon baselines skip the learning stages
and fill rows directly.  The victim is always a separate training run
that never sees attacker internals.

Every stage draws its seed from the master seed through a named stream,
so stages can be re-run independently and two runs with the same config
and seed produce byte-identical artifacts.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import (
    Dataset,
    PoisonedMatrix,
    RunLog,
    TargetSet,
    activity_cap,
    inject_profiles,
    round_half_up,
    sample_attacker_view,
)
from .diffusion import (
    DenoiserParams,
    DiffusionConfig,
    bottleneck_probe,
    sample_latent,
    schedule_from_config,
    train_generator,
)
from .geometry import logdet_covariance
from .projection import (
    FakeProfileSet,
    ProjectionConfig,
    RowProvenance,
    binarize,
    default_lam_pois,
    project_profile,
)
from .recommender import (
    EmbeddingTable,
    RecommenderConfig,
    high_activity_pool,
    pretrain,
    select_conditions,
)
from .seeding import stream

METHODS = ("dlda", "random", "bandwagon", "none")


@dataclass(frozen=True)
class AttackConfig:
    """Everything one attack run needs besides the training data.

    injection_ratio 0 is allowed as the degenerate empty attack (no rows
    generated, clean matrix back); above 0.05 is rejected as outside the
    studied regime.
    """

    method: str
    targets: TargetSet
    seed: int
    injection_ratio: float = 0.01
    view_fraction: float = 0.25
    pool_fraction: float = 0.1
    n_condition_pairs: int = 64
    popular_fraction: float = 0.1
    recommender: RecommenderConfig = field(default_factory=RecommenderConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    projection: ProjectionConfig | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {'|'.join(METHODS)}, got {self.method!r}")
        if not 0.0 <= self.injection_ratio <= 0.05:
            raise ValueError(f"injection_ratio must be in [0, 0.05], got {self.injection_ratio}")
        if not 0.0 < self.view_fraction <= 1.0:
            raise ValueError(f"view_fraction must be in (0, 1], got {self.view_fraction}")
        if not 0.0 < self.pool_fraction <= 1.0:
            raise ValueError(f"pool_fraction must be in (0, 1], got {self.pool_fraction}")
        if not 0.0 < self.popular_fraction <= 1.0:
            raise ValueError(f"popular_fraction must be in (0, 1], got {self.popular_fraction}")
        if self.n_condition_pairs < 1:
            raise ValueError(f"n_condition_pairs must be positive, got {self.n_condition_pairs}")
        if self.targets.items.size == 0:
            raise ValueError("target set is empty")
        if int(self.seed) != self.seed or self.seed < 0:
            raise ValueError(f"seed must be a non-negative integer, got {self.seed}")


@dataclass(frozen=True)
class AttackRun:
    """Everything a finished attack produced, reconstructible from
    (config, input dataset).

    ``diagnostics`` holds cheap post-stage measurements; the generative
    pipeline records the log-det covariance of a bottleneck probe there,
    which is how the dispersion weight's spreading effect is monitored
    without retraining a victim.
    """

    config: AttackConfig
    poisoned: PoisonedMatrix
    profiles: FakeProfileSet
    cap: int
    projection: ProjectionConfig | None
    timings: dict
    surrogate: EmbeddingTable | None = None
    generator: DenoiserParams | None = None
    diagnostics: dict = field(default_factory=dict)


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name, and the path of
    the newest persisted artifact when a runner recorded one."""

    def __init__(self, stage: str, msg: str, checkpoint=None):
        super().__init__(f"stage {stage!r} failed: {msg}")
        self.stage = stage
        self.checkpoint = checkpoint


def derived_seed(master_seed: int, *path) -> int:
    """Deterministic fan-out of the master seed along a named path."""
    return int(stream(master_seed, *path).integers(0, 2**31 - 1))


def stage_seed(master_seed: int, stage: str) -> int:
    return derived_seed(master_seed, "stage", stage)


def trial_seeds(master_seed: int, n_trials: int = 5) -> list[int]:
    """Independent per-trial master seeds for the repeated-run protocol."""
    return [derived_seed(master_seed, "trial", i) for i in range(n_trials)]


def n_fake_users(config: AttackConfig, train: Dataset) -> int:
    return round_half_up(config.injection_ratio * train.n_users)


def _run_stage(timings: dict, stage: str, fn):
    tic = time.perf_counter()
    try:
        out = fn()
    except StageError:
        raise
    except Exception as exc:
        raise StageError(stage, str(exc)) from exc
    timings[stage] = time.perf_counter() - tic
    return out


def _emit(on_artifact, name: str, payload) -> None:
    if on_artifact is not None:
        on_artifact(name, payload)


def _empty_run(config: AttackConfig, train: Dataset, timings: dict) -> AttackRun:
    profiles = FakeProfileSet(
        rows=np.zeros((0, train.n_items), dtype=np.int64),
        target_items=config.targets.items,
        provenance=(),
    )
    poisoned = _run_stage(timings, "injection",
                          lambda: inject_profiles(train, profiles.rows))
    return AttackRun(config=config, poisoned=poisoned, profiles=profiles,
                     cap=activity_cap(train), projection=None, timings=timings)


def run_dlda(config: AttackConfig, train: Dataset, log: RunLog | None = None,
             on_artifact=None) -> AttackRun:
    """Full generative pipeline: view -> surrogate -> conditions ->
    generator -> profiles -> injection.

    ``on_artifact(name, payload)`` fires after the surrogate, generator,
    and profile stages so a runner can persist checkpoints as they
    complete.  A zero injection ratio short-circuits to an empty run.
    """
    timings: dict = {}
    m_a = n_fake_users(config, train)
    if m_a == 0:
        return _empty_run(config, train, timings)

    view = _run_stage(timings, "view", lambda: sample_attacker_view(
        train, config.view_fraction, stage_seed(config.seed, "view")))
    table = _run_stage(timings, "surrogate", lambda: pretrain(
        config.recommender, view, stage_seed(config.seed, "surrogate"), log))
    _emit(on_artifact, "surrogate", table)
    cond = _run_stage(timings, "conditions", lambda: select_conditions(
        table, view, config.targets, config.n_condition_pairs,
        stage_seed(config.seed, "conditions")))
    _, z0_pool = high_activity_pool(table, view, config.pool_fraction)
    params = _run_stage(timings, "generator", lambda: train_generator(
        config.diffusion, z0_pool, cond.z_user, cond.z_item,
        stage_seed(config.seed, "generator"), log))
    _emit(on_artifact, "generator", params)
    try:
        probe = bottleneck_probe(params, config.diffusion, z0_pool,
                                 cond.z_user, cond.z_item,
                                 stage_seed(config.seed, "probe"))
        diagnostics = {"bottleneck_logdet": float(logdet_covariance(probe))}
    except Exception:
        # a finite but saturated net can overflow the probe's forward pass;
        # losing the diagnostic must not kill the attack
        diagnostics = {}
        if log is not None:
            log.note("bottleneck probe failed; diagnostic skipped")

    cap = activity_cap(train)
    proj = config.projection
    if proj is None:
        proj = ProjectionConfig(
            lam_pois=default_lam_pois(train, config.targets.items.size),
            n_max=cap,
        )

    def make_profiles() -> FakeProfileSet:
        sched = schedule_from_config(config.diffusion)
        rows = np.zeros((m_a, train.n_items), dtype=np.int64)
        prov = []
        for k in range(m_a):
            rng = stream(config.seed, "profiles", k)
            idx = int(rng.integers(cond.users.size))
            z = sample_latent(params, sched, cond.z_user[idx], cond.z_item[idx], rng)
            out = project_profile(z, table.item, proj, config.targets.items, rng)
            rows[k] = out.row
            prov.append(RowProvenance(
                row_seed=k,
                cond_user=int(cond.users[idx]),
                cond_item=int(cond.items[idx]),
                drawn_n=out.drawn_n,
                active_size=out.active_size,
            ))
        return FakeProfileSet(rows=rows, target_items=config.targets.items,
                              provenance=tuple(prov))

    profiles = _run_stage(timings, "profiles", make_profiles)
    _emit(on_artifact, "profiles", profiles)
    poisoned = _run_stage(timings, "injection",
                          lambda: inject_profiles(train, profiles.rows, cap=proj.n_max))
    if log is not None:
        log.note(f"dlda: injected {m_a} fake rows (cap {proj.n_max})")
    return AttackRun(config=config, poisoned=poisoned, profiles=profiles,
                     cap=cap, projection=proj, timings=timings,
                     surrogate=table, generator=params, diagnostics=diagnostics)


# ------------------------------------------------------------------ baselines

def bandwagon_pool(train: Dataset, popular_fraction: float) -> np.ndarray:
    """The most-interacted floor(fraction*N) items (at least one), as
    sorted indices."""
    if not 0.0 < popular_fraction <= 1.0:
        raise ValueError(f"popular_fraction must be in (0, 1], got {popular_fraction}")
    counts = np.bincount(train.interactions[:, 1], minlength=train.n_items)
    order = np.lexsort((np.arange(train.n_items), -counts))
    take = max(1, int(popular_fraction * train.n_items))
    return np.sort(order[:take])


def heuristic_profiles(train: Dataset, targets: np.ndarray, pool: np.ndarray,
                       seed: int, n_rows: int, cap: int) -> FakeProfileSet:
    """Rows of exactly ``cap`` interactions: every target plus fillers
    drawn uniformly without replacement from ``pool`` (targets excluded),
    topping up from the remaining non-target items if the pool runs dry.
    """
    targets = np.unique(np.asarray(targets, dtype=np.int64).reshape(-1))
    n_fill = cap - targets.size
    if n_fill < 0:
        raise ValueError(f"activity cap {cap} cannot hold {targets.size} target items")
    pool = np.setdiff1d(np.asarray(pool, dtype=np.int64), targets)
    others = np.setdiff1d(np.arange(train.n_items, dtype=np.int64), targets)
    rows = np.zeros((n_rows, train.n_items), dtype=np.int64)
    prov = []
    for k in range(n_rows):
        rng = stream(seed, "profiles", k)
        take = min(n_fill, pool.size)
        fillers = rng.choice(pool, size=take, replace=False) if take else np.empty(0, np.int64)
        short = n_fill - take
        if short > 0:
            rest = np.setdiff1d(others, fillers)
            extra = rng.choice(rest, size=min(short, rest.size), replace=False)
            fillers = np.concatenate([fillers, extra])
        rows[k] = binarize(fillers, targets, train.n_items)
        prov.append(RowProvenance(row_seed=k, cond_user=-1, cond_item=-1,
                                  drawn_n=int(fillers.size),
                                  active_size=int(fillers.size)))
    return FakeProfileSet(rows=rows, target_items=targets, provenance=tuple(prov))


def _run_heuristic(config: AttackConfig, train: Dataset, pool: np.ndarray,
                   log: RunLog | None, on_artifact) -> AttackRun:
    timings: dict = {}
    m_a = n_fake_users(config, train)
    if m_a == 0:
        return _empty_run(config, train, timings)
    cap = activity_cap(train)
    profiles = _run_stage(timings, "profiles", lambda: heuristic_profiles(
        train, config.targets.items, pool, config.seed, m_a, cap))
    _emit(on_artifact, "profiles", profiles)
    poisoned = _run_stage(timings, "injection",
                          lambda: inject_profiles(train, profiles.rows, cap=cap))
    if log is not None:
        log.note(f"{config.method}: injected {m_a} fake rows (cap {cap})")
    return AttackRun(config=config, poisoned=poisoned, profiles=profiles,
                     cap=cap, projection=None, timings=timings)


def run_random(config: AttackConfig, train: Dataset, log: RunLog | None = None,
               on_artifact=None) -> AttackRun:
    """Targets plus uniformly random non-target fillers up to the cap."""
    pool = np.arange(train.n_items, dtype=np.int64)
    return _run_heuristic(config, train, pool, log, on_artifact)


def run_bandwagon(config: AttackConfig, train: Dataset,
                  popular_fraction: float | None = None,
                  log: RunLog | None = None, on_artifact=None) -> AttackRun:
    """Targets plus fillers from the popular pool (random top-up); with a
    fraction of 1 the pool covers the catalogue and this matches
    run_random draw for draw."""
    fraction = config.popular_fraction if popular_fraction is None else popular_fraction
    pool = bandwagon_pool(train, fraction)
    return _run_heuristic(config, train, pool, log, on_artifact)


def run_none(config: AttackConfig, train: Dataset, log: RunLog | None = None,
             on_artifact=None) -> AttackRun:
    """Clean baseline: no fake rows, the poisoned matrix equals the input."""
    return _empty_run(config, train, {})


def run_attack(config: AttackConfig, train: Dataset, log: RunLog | None = None,
               on_artifact=None) -> AttackRun:
    if config.method == "dlda":
        return run_dlda(config, train, log, on_artifact)
    if config.method == "random":
        return run_random(config, train, log, on_artifact)
    if config.method == "bandwagon":
        return run_bandwagon(config, train, log=log, on_artifact=on_artifact)
    return run_none(config, train, log, on_artifact)


# --------------------------------------------------------------- the victim

def training_dataset(poisoned: PoisonedMatrix) -> Dataset:
    """The poisoned matrix as a trainable Dataset: real users keep their
    indices and raw ids, fake users append below with synthetic ids."""
    base = poisoned.base
    fake_pairs = [
        (base.n_users + k, int(i))
        for k in range(poisoned.n_fake)
        for i in np.flatnonzero(poisoned.fake_rows[k])
    ]
    pairs = np.vstack([base.interactions,
                       np.asarray(fake_pairs, dtype=np.int64).reshape(-1, 2)])
    user_ids = list(base.user_ids) + [f"fake_{k}" for k in range(poisoned.n_fake)]
    return Dataset(pairs, user_ids, base.item_ids)


def retrain_victim(poisoned: PoisonedMatrix, victim_config: RecommenderConfig,
                   seed: int, log: RunLog | None = None) -> EmbeddingTable:
    """Fresh victim training on the full poisoned matrix.

    The returned table covers real plus fake users; downstream ranking
    only ever evaluates the first n_real rows.  Divergence aborts.
    """
    return pretrain(victim_config, training_dataset(poisoned), seed, log)
