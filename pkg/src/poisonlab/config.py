"""Experiment configuration and run manifests.

One JSON file describes a whole experiment: where the interactions live,
how to split them, the attack method and its budgets, and the trainer,
generator, projection, and evaluation settings. Loading validates every
field and reports violations by dotted path ("diffusion.tau", not just
"tau"). The manifest written next to a finished run snapshots the config,
the dataset hash, the derived per-stage seeds, and the artifact paths, so
the run can be re-executed bit for bit; wall-clock timings are the only
fields expected to differ between re-runs.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import __version__
from .data import Dataset
from .diffusion import DiffusionConfig
from .projection import ProjectionConfig
from .recommender import RecommenderConfig
from .serialize import read_json, write_json

CONFIG_KIND = "experiment-config"
CONFIG_SCHEMA = 1
MANIFEST_KIND = "run-manifest"
MANIFEST_SCHEMA = 1

ENV_OUT = "POISONLAB_OUT"
ENV_THREADS = "POISONLAB_THREADS"


class ConfigError(ValueError):
    """A config field failed validation; the message names its dotted path."""


@dataclass(frozen=True)
class DataSettings:
    path: str = ""
    fmt: str = "tsv"
    min_rating: float | None = None
    split_seed: int = 0

    def __post_init__(self):
        if self.fmt != "tsv":
            raise ConfigError(f"data.fmt must be 'tsv', got {self.fmt!r}")
        if self.min_rating is not None and not np.isfinite(self.min_rating):
            raise ConfigError(f"data.min_rating must be finite, got {self.min_rating}")
        if int(self.split_seed) != self.split_seed or self.split_seed < 0:
            raise ConfigError(f"data.split_seed must be a non-negative integer, got {self.split_seed}")


@dataclass(frozen=True)
class AttackSettings:
    method: str = "dlda"
    injection_ratio: float = 0.01
    n_targets: int = 5
    target_popularity: str = "unpopular"
    view_fraction: float = 0.25
    pool_fraction: float = 0.1
    n_condition_pairs: int = 64
    popular_fraction: float = 0.1

    def __post_init__(self):
        if self.method not in ("dlda", "random", "bandwagon", "none"):
            raise ConfigError(f"attack.method must be dlda|random|bandwagon|none, got {self.method!r}")
        if not 0.0 <= self.injection_ratio <= 0.05:
            raise ConfigError(f"attack.injection_ratio must be in [0, 0.05], got {self.injection_ratio}")
        if self.n_targets < 1:
            raise ConfigError(f"attack.n_targets must be positive, got {self.n_targets}")
        if self.target_popularity not in ("popular", "unpopular"):
            raise ConfigError(
                f"attack.target_popularity must be popular|unpopular, got {self.target_popularity!r}")
        for name in ("view_fraction", "pool_fraction", "popular_fraction"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ConfigError(f"attack.{name} must be in (0, 1], got {v}")
        if self.n_condition_pairs < 1:
            raise ConfigError(f"attack.n_condition_pairs must be positive, got {self.n_condition_pairs}")


@dataclass(frozen=True)
class EvaluationSettings:
    ks: tuple = (10, 50)
    n_trials: int = 5
    k_neighbors: int = 10
    graph_k: int = 10

    def __post_init__(self):
        ks = tuple(int(k) for k in self.ks)
        if not ks or any(k < 1 for k in ks):
            raise ConfigError(f"evaluation.ks must be a nonempty list of positive cutoffs, got {list(self.ks)}")
        object.__setattr__(self, "ks", ks)
        if self.n_trials < 1:
            raise ConfigError(f"evaluation.n_trials must be positive, got {self.n_trials}")
        if self.k_neighbors < 1:
            raise ConfigError(f"evaluation.k_neighbors must be positive, got {self.k_neighbors}")
        if self.graph_k < 1:
            raise ConfigError(f"evaluation.graph_k must be positive, got {self.graph_k}")


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSettings = field(default_factory=DataSettings)
    attack: AttackSettings = field(default_factory=AttackSettings)
    recommender: RecommenderConfig = field(default_factory=RecommenderConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    projection: ProjectionConfig | None = None
    evaluation: EvaluationSettings = field(default_factory=EvaluationSettings)
    seed: int = 0
    out_dir: str = "runs"
    threads: int = 1

    def __post_init__(self):
        if int(self.seed) != self.seed or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed}")
        if self.threads < 1:
            raise ConfigError(f"threads must be positive, got {self.threads}")
        if not self.out_dir:
            raise ConfigError("out_dir must be a non-empty path")


def default_config(**overrides) -> ExperimentConfig:
    return replace(ExperimentConfig(), **overrides)


# -------------------------------------------------------------------- (de)serialization

_SECTIONS = {
    "data": DataSettings,
    "attack": AttackSettings,
    "recommender": RecommenderConfig,
    "diffusion": DiffusionConfig,
    "projection": ProjectionConfig,
    "evaluation": EvaluationSettings,
}
_SCALARS = ("seed", "out_dir", "threads")


def config_to_dict(config: ExperimentConfig) -> dict:
    out = {"kind": CONFIG_KIND, "schema_version": CONFIG_SCHEMA}
    for name in _SECTIONS:
        value = getattr(config, name)
        if value is None:
            out[name] = None
        else:
            out[name] = {k: (list(v) if isinstance(v, tuple) else v)
                         for k, v in asdict(value).items()}
    for name in _SCALARS:
        out[name] = getattr(config, name)
    return out


def _build_section(name: str, cls, raw) -> object:
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected an object, got {type(raw).__name__}")
    fields = {f.name for f in cls.__dataclass_fields__.values()}
    unknown = sorted(set(raw) - fields)
    if unknown:
        raise ConfigError(f"{name}.{unknown[0]}: unknown field")
    try:
        return cls(**raw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        # library sub-configs phrase violations as "config.<field> ...";
        # rewrite to the dotted path of this section
        raise ConfigError(f"{name}.{str(exc).replace('config.', '')}") from exc


def config_from_dict(obj: dict) -> ExperimentConfig:
    if not isinstance(obj, dict):
        raise ConfigError("config root must be a JSON object")
    if obj.get("kind") != CONFIG_KIND:
        raise ConfigError(f"kind: expected {CONFIG_KIND!r}, got {obj.get('kind')!r}")
    if obj.get("schema_version") != CONFIG_SCHEMA:
        raise ConfigError(f"schema_version: unsupported value {obj.get('schema_version')!r}")
    known = set(_SECTIONS) | set(_SCALARS) | {"kind", "schema_version"}
    unknown = sorted(set(obj) - known)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown field")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name not in obj or obj[name] is None:
            if name == "projection":
                kwargs[name] = None
                continue
            kwargs[name] = cls()
            continue
        kwargs[name] = _build_section(name, cls, obj[name])
    for name in _SCALARS:
        if name in obj:
            kwargs[name] = obj[name]
    try:
        return ExperimentConfig(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def apply_env_overrides(config: ExperimentConfig, env=None) -> ExperimentConfig:
    """Only the output directory and the thread count listen to the
    environment; everything else must come from the file."""
    env = os.environ if env is None else env
    changes = {}
    if env.get(ENV_OUT):
        changes["out_dir"] = env[ENV_OUT]
    if env.get(ENV_THREADS):
        try:
            changes["threads"] = int(env[ENV_THREADS])
        except ValueError:
            raise ConfigError(f"threads: {ENV_THREADS} must be an integer, "
                              f"got {env[ENV_THREADS]!r}") from None
    return replace(config, **changes) if changes else config


def save_config(path, config: ExperimentConfig) -> None:
    write_json(path, config_to_dict(config))


def load_config(path, env=None) -> ExperimentConfig:
    try:
        obj = read_json(path)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return apply_env_overrides(config_from_dict(obj), env)


# ------------------------------------------------------------------ manifest

def dataset_hash(d: Dataset) -> str:
    """Content hash over counts, raw id tables, and the interaction pairs."""
    h = hashlib.sha256()
    h.update(f"{d.n_users} {d.n_items} {d.n_interactions}".encode())
    for raw_id in d.user_ids:
        h.update(b"\x00" + str(raw_id).encode())
    for raw_id in d.item_ids:
        h.update(b"\x01" + str(raw_id).encode())
    h.update(np.ascontiguousarray(d.interactions).tobytes())
    return h.hexdigest()


def build_manifest(config: ExperimentConfig, data_digest: str, seeds: dict,
                   artifacts: dict, timings: dict, extras: dict | None = None) -> dict:
    manifest = {
        "kind": MANIFEST_KIND,
        "schema_version": MANIFEST_SCHEMA,
        "tool_version": __version__,
        "config": config_to_dict(config),
        "dataset_hash": data_digest,
        "seeds": seeds,
        "artifacts": artifacts,
        "timings_seconds": timings,
    }
    if extras:
        manifest.update(extras)
    return manifest


def write_manifest(path, manifest: dict) -> None:
    write_json(path, manifest)


def read_manifest(path) -> dict:
    try:
        obj = read_json(path)
    except FileNotFoundError:
        raise FileNotFoundError(f"manifest not found: {path}") from None
    if obj.get("kind") != MANIFEST_KIND:
        raise ValueError(f"{path}: expected a {MANIFEST_KIND}, found {obj.get('kind')!r}")
    if obj.get("schema_version") != MANIFEST_SCHEMA:
        raise ValueError(f"{path}: unsupported schema_version {obj.get('schema_version')!r}")
    return obj


def manifest_identity(manifest: dict) -> dict:
    """The manifest minus its wall-clock fields, for equality checks."""
    return {k: v for k, v in manifest.items() if k != "timings_seconds"}
