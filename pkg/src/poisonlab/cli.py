"""Command-line entry point.

Subcommands: ingest (load and summarize an interaction log), attack (run
one poisoning pipeline into a run directory), evaluate (victim retraining
plus effectiveness/stealth reports for a finished run), sweep (repeat the
attack across dispersion weights), and report (align finished runs into a
comparison table). Every run directory is self-describing: a manifest
records the config snapshot, dataset hash, derived seeds, and artifact
paths, and re-executing it reproduces the artifacts byte for byte apart
from wall-clock fields.

Exit codes: 0 success, 1 usage or config errors, 2 runtime failures.
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import figures
from .attack import (
    AttackConfig,
    StageError,
    derived_seed,
    retrain_victim,
    run_attack,
    stage_seed,
    trial_seeds,
)
from .config import (
    ConfigError,
    ExperimentConfig,
    build_manifest,
    config_from_dict,
    dataset_hash,
    load_config,
    read_manifest,
    save_config,
    write_manifest,
)
from .data import DataError, RunLog, inject_profiles, load_interactions, select_targets, split_dataset
from .diffusion import GeneratorDiverged, save_generator
from .evaluation import (
    EFFECTIVENESS_KIND,
    STEALTH_KIND,
    effectiveness_report,
    effectiveness_trial,
    export_pca_csv,
    read_report,
    stealth_report,
    write_report,
)
from .projection import export_profiles, load_profiles
from .recommender import TrainingDiverged, pretrain, save_embeddings

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

MANIFEST_NAME = "manifest.json"
PROFILES_TSV = "profiles.tsv"
PROFILES_JSON = "profiles.json"
EFFECTIVENESS_JSON = "effectiveness.json"
STEALTH_JSON = "stealth.json"


class UsageError(Exception):
    """Bad invocation or bad inputs; maps to exit code 1."""


# -------------------------------------------------------------------- ingest

def dataset_stats(d) -> dict:
    m, n, nnz = d.n_users, d.n_items, d.n_interactions
    return {
        "users": m,
        "items": n,
        "interactions": nnz,
        "interactions_per_item": nnz / n,
        "interactions_per_user": nnz / m,
        "sparsity_percent": 100.0 * (1.0 - nnz / (m * n)),
    }


def stats_line(stats: dict) -> str:
    return (f"users={stats['users']} items={stats['items']} "
            f"interactions={stats['interactions']} "
            f"avg_interactions={stats['interactions_per_item']:.2f} "
            f"avg_activity={stats['interactions_per_user']:.2f} "
            f"sparsity={stats['sparsity_percent']:.2f}%")


def cmd_ingest(path, out_dir=None, min_rating=None) -> dict:
    """Load an interaction log, print its summary line, and (optionally)
    write the summary JSON with the dataset hash."""
    d = load_interactions(path, min_rating=min_rating)
    summary = {"kind": "dataset-summary", "schema_version": 1, "path": str(path)}
    summary.update(dataset_stats(d))
    summary["dataset_hash"] = dataset_hash(d)
    print(stats_line(summary))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_report(out_dir / "ingest.json", summary)
    return summary


# -------------------------------------------------------------------- attack

def run_dir_for(config: ExperimentConfig) -> Path:
    return Path(config.out_dir) / f"{config.attack.method}-seed{config.seed}"


def attack_config_from(config: ExperimentConfig, targets) -> AttackConfig:
    a = config.attack
    return AttackConfig(
        method=a.method,
        targets=targets,
        seed=config.seed,
        injection_ratio=a.injection_ratio,
        view_fraction=a.view_fraction,
        pool_fraction=a.pool_fraction,
        n_condition_pairs=a.n_condition_pairs,
        popular_fraction=a.popular_fraction,
        recommender=config.recommender,
        diffusion=config.diffusion,
        projection=config.projection,
    )


def cmd_attack(config: ExperimentConfig, run_dir=None) -> dict:
    """Run the configured attack and leave a self-describing run directory
    behind; returns the manifest."""
    if not config.data.path:
        raise UsageError("data.path is empty; point the config at an interaction log")
    run_dir = run_dir_for(config) if run_dir is None else Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    log = RunLog()

    d = load_interactions(config.data.path, min_rating=config.data.min_rating)
    digest = dataset_hash(d)
    split = split_dataset(d, config.data.split_seed, log)
    targets = select_targets(d, config.attack.n_targets, config.attack.target_popularity,
                             derived_seed(config.seed, "targets"), log)

    artifacts: dict = {}

    def persist(name, payload):
        if name == "surrogate":
            save_embeddings(run_dir / "surrogate.ckpt", payload,
                            config.recommender.model, config.seed)
            artifacts["surrogate"] = "surrogate.ckpt"
        elif name == "generator":
            save_generator(run_dir / "generator.ckpt", payload,
                           config.diffusion, config.seed)
            artifacts["generator"] = "generator.ckpt"
        elif name == "profiles":
            export_profiles(payload, d.item_ids, run_dir / PROFILES_TSV,
                            run_dir / PROFILES_JSON)
            artifacts["profiles_tsv"] = PROFILES_TSV
            artifacts["profiles_json"] = PROFILES_JSON

    try:
        run = run_attack(attack_config_from(config, targets), split.train, log, persist)
    except StageError as exc:
        if artifacts:
            exc.checkpoint = str(run_dir / list(artifacts.values())[-1])
        log.note(f"stage {exc.stage} failed: {exc}")
        log.write(run_dir / "log.txt")
        raise
    if "profiles" not in artifacts:
        persist("profiles", run.profiles)

    seeds = {
        "master": config.seed,
        "split": config.data.split_seed,
        "targets": derived_seed(config.seed, "targets"),
        "stages": {name: stage_seed(config.seed, name)
                   for name in ("view", "surrogate", "conditions", "generator")},
        "trials": trial_seeds(config.seed, config.evaluation.n_trials),
        "stealth": derived_seed(config.seed, "stealth"),
    }
    logdet = run.diagnostics.get("bottleneck_logdet")
    extras = {
        "method": config.attack.method,
        "n_users": d.n_users,
        "n_items": d.n_items,
        "target_items": targets.items,
        "n_fake": run.profiles.n_rows,
        "activity_cap": run.cap,
        "bottleneck_logdet": logdet if logdet is not None and np.isfinite(logdet) else None,
    }
    manifest = build_manifest(config, digest, seeds, artifacts,
                              {k: float(v) for k, v in run.timings.items()}, extras)
    save_config(run_dir / "config.json", config)
    write_manifest(run_dir / MANIFEST_NAME, manifest)
    log.write(run_dir / "log.txt")
    print(f"attack method={config.attack.method} fakes={run.profiles.n_rows} "
          f"cap={run.cap} run_dir={run_dir}")
    return manifest


# ------------------------------------------------------------------ evaluate

def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"missing {what}: {path}")
    return path


def cmd_evaluate(run_dir, ks=None, threads=None) -> dict:
    """Retrain clean and poisoned victims for every trial seed in the
    manifest and write the effectiveness/stealth reports plus figures."""
    run_dir = Path(run_dir)
    manifest = read_manifest(_require(run_dir / MANIFEST_NAME, "run manifest"))
    config = config_from_dict(manifest["config"])
    ks = tuple(int(k) for k in (ks or config.evaluation.ks))
    threads = config.threads if threads is None else max(1, int(threads))

    d = load_interactions(config.data.path, min_rating=config.data.min_rating)
    if dataset_hash(d) != manifest["dataset_hash"]:
        raise UsageError(f"dataset at {config.data.path} does not match the "
                         f"manifest hash; the run is not reproducible from it")
    split = split_dataset(d, config.data.split_seed)
    profiles = load_profiles(_require(run_dir / PROFILES_TSV, "fake profiles"),
                             _require(run_dir / PROFILES_JSON, "profile provenance"),
                             d.item_ids)
    poisoned = inject_profiles(split.train, profiles.rows)
    targets = np.asarray(manifest["target_items"], dtype=np.int64)

    def one_trial(seed: int):
        clean = pretrain(config.recommender, split.train, seed)
        victim = retrain_victim(poisoned, config.recommender, seed)
        metrics = effectiveness_trial(clean, victim, split.train, split.test,
                                      targets, ks)
        return metrics, victim

    seeds = manifest["seeds"]["trials"]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(one_trial, seeds))
    else:
        outcomes = [one_trial(s) for s in seeds]

    report = effectiveness_report([m for m, _ in outcomes], ks)
    write_report(run_dir / EFFECTIVENESS_JSON, report)
    figures.effectiveness_bars(run_dir / "effectiveness.png", report)

    n_real = split.train.n_users
    stealth = None
    if profiles.n_rows > 0:
        table = outcomes[0][1]
        groups = {"real": table.user[:n_real], "fake": table.user[n_real:]}
        stealth = stealth_report(groups["real"], groups["fake"],
                                 seed=manifest["seeds"]["stealth"],
                                 k_neighbors=config.evaluation.k_neighbors,
                                 graph_k=config.evaluation.graph_k)
        write_report(run_dir / STEALTH_JSON, stealth)
        export_pca_csv(run_dir / "pca.csv", groups)
        figures.latent_scatter(run_dir / "latent.png", groups)

    key = f"target_hit@{ks[0]}"
    print(f"evaluate run_dir={run_dir} trials={len(seeds)} "
          f"clean_{key}={report['mean']['clean'][key]:.4f} "
          f"poisoned_{key}={report['mean']['poisoned'][key]:.4f}")
    return {"effectiveness": report, "stealth": stealth}


# --------------------------------------------------------------------- sweep

def cmd_sweep(config: ExperimentConfig, values, out_dir=None) -> list[dict]:
    """One attack+evaluation per dispersion weight, same seeds throughout;
    failures are recorded per value and the sweep keeps going."""
    values = [float(v) for v in values]
    if not values:
        raise UsageError("sweep needs at least one value")
    out_dir = Path(out_dir) if out_dir else Path(config.out_dir) / f"sweep-seed{config.seed}"
    out_dir.mkdir(parents=True, exist_ok=True)
    k = config.evaluation.ks[0]
    rows = []
    for v in values:
        cfg_v = replace(config, diffusion=replace(config.diffusion, lam_disp=v))
        run_dir = out_dir / f"lam{v:g}"
        row = {"lam_disp": v, "target_hit": None, "global_delta": None,
               "logdet": None, "error": ""}
        try:
            manifest = cmd_attack(cfg_v, run_dir)
            result = cmd_evaluate(run_dir)
            row["target_hit"] = result["effectiveness"]["mean"]["poisoned"][f"target_hit@{k}"]
            row["global_delta"] = result["effectiveness"]["mean"]["delta"][f"global_hit@{k}"]
            row["logdet"] = manifest["bottleneck_logdet"]
        except (StageError, TrainingDiverged, GeneratorDiverged, UsageError,
                DataError, ValueError) as exc:
            row["error"] = str(exc)
        rows.append(row)

    lines = [f"lam_disp,target_hit@{k},global_delta_hit@{k},logdet_cov,error"]
    for r in rows:
        cells = [format(r["lam_disp"], ".17g")]
        for key in ("target_hit", "global_delta", "logdet"):
            cells.append("" if r[key] is None else format(r[key], ".17g"))
        cells.append('"' + r["error"].replace('"', "'") + '"' if r["error"] else "")
        lines.append(",".join(cells))
    (out_dir / "sweep.csv").write_text("".join(line + "\n" for line in lines), "utf-8")
    if any(r["error"] == "" for r in rows):
        figures.sweep_curves(out_dir / "sweep.png", rows)
    print(f"sweep values={len(values)} out_dir={out_dir}")
    return rows


# -------------------------------------------------------------------- report

_STEALTH_ROWS = (
    ("mahalanobis_fake_mean", ("metrics", "mahalanobis", "fake", "mean")),
    ("kde_likelihood_fake_mean", ("metrics", "kde_likelihood", "fake", "mean")),
    ("isolation_forest_fake_mean", ("metrics", "isolation_forest", "fake", "mean")),
    ("rvc_entropy", ("rvc_entropy",)),
    ("logdet_fake", ("logdet_covariance", "fake")),
)


def _dig(obj, path):
    for part in path:
        obj = obj[part]
    return obj


def cmd_report(run_dirs, out_dir=None) -> dict:
    """Align finished runs into one metric-by-run table (csv + markdown
    plus a bar chart); runs without a stealth report show 'absent'."""
    run_dirs = [Path(r) for r in run_dirs]
    if not run_dirs:
        raise UsageError("report needs at least one run directory")
    columns = []
    for rd in run_dirs:
        manifest = read_manifest(_require(rd / MANIFEST_NAME, "run manifest"))
        eff = read_report(_require(rd / EFFECTIVENESS_JSON, "effectiveness report"),
                          EFFECTIVENESS_KIND)
        stealth = None
        if (rd / STEALTH_JSON).exists():
            stealth = read_report(rd / STEALTH_JSON, STEALTH_KIND)
        columns.append({"label": rd.name, "manifest": manifest,
                        "effectiveness": eff, "stealth": stealth})
    k_list = columns[0]["effectiveness"]["k_list"]
    for col in columns[1:]:
        if col["effectiveness"]["k_list"] != k_list:
            raise UsageError(f"run {col['label']} was evaluated at cutoffs "
                             f"{col['effectiveness']['k_list']}, expected {k_list}")

    rows = [("method", [c["manifest"]["method"] for c in columns]),
            ("n_fake", [c["manifest"]["n_fake"] for c in columns])]
    for k in k_list:
        for section in ("clean", "poisoned", "delta"):
            rows.append((f"{section}_target_hit@{k}",
                         [c["effectiveness"]["mean"][section][f"target_hit@{k}"]
                          for c in columns]))
        rows.append((f"delta_global_hit@{k}",
                     [c["effectiveness"]["mean"]["delta"][f"global_hit@{k}"]
                      for c in columns]))
    for label, path in _STEALTH_ROWS:
        cells = []
        for c in columns:
            if c["stealth"] is None:
                cells.append("absent")
            else:
                value = _dig(c["stealth"], path)
                cells.append("absent" if value is None else value)
        rows.append((label, cells))

    def fmt(v):
        if isinstance(v, float):
            return format(v, ".6g")
        return str(v)

    header = ["metric"] + [c["label"] for c in columns]
    csv_lines = [",".join(header)]
    md_lines = ["| " + " | ".join(header) + " |",
                "|" + "|".join(" --- " for _ in header) + "|"]
    for name, cells in rows:
        csv_lines.append(",".join([name] + [fmt(v) for v in cells]))
        md_lines.append("| " + " | ".join([name] + [fmt(v) for v in cells]) + " |")

    out_dir = Path(out_dir) if out_dir else run_dirs[0].parent
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "comparison.csv").write_text("".join(l + "\n" for l in csv_lines), "utf-8")
    (out_dir / "comparison.md").write_text("".join(l + "\n" for l in md_lines), "utf-8")

    k0 = k_list[0]
    figures.comparison_bars(
        out_dir / "comparison.png",
        [c["label"] for c in columns],
        [c["effectiveness"]["mean"]["poisoned"][f"target_hit@{k0}"] for c in columns],
        f"poisoned target hit@{k0}")
    print("\n".join(md_lines))
    return {"rows": rows, "columns": [c["label"] for c in columns],
            "csv": out_dir / "comparison.csv", "markdown": out_dir / "comparison.md"}


# ---------------------------------------------------------------------- main

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="poisonlab",
                     description="recommender poisoning laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="load and summarize an interaction log")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--min-rating", type=float, default=None)

    for name in ("attack", "sweep"):
        p = sub.add_parser(name, help=f"run the {name} pipeline")
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        if name == "sweep":
            p.add_argument("--values", required=True,
                           help="comma-separated dispersion weights")

    p = sub.add_parser("evaluate", help="evaluate a finished run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--k", type=int, action="append", default=None)
    p.add_argument("--threads", type=int, default=None)

    p = sub.add_parser("report", help="compare evaluated runs")
    p.add_argument("--run", action="append", required=True)
    p.add_argument("--out", default=None)
    return parser


def _load_experiment(args) -> ExperimentConfig:
    config = load_config(args.config)
    changes = {}
    if args.out is not None:
        changes["out_dir"] = args.out
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        changes["threads"] = args.threads
    return replace(config, **changes) if changes else config


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        if args.command == "ingest":
            cmd_ingest(args.data, args.out, args.min_rating)
        elif args.command == "attack":
            cmd_attack(_load_experiment(args))
        elif args.command == "evaluate":
            cmd_evaluate(args.run, ks=args.k, threads=args.threads)
        elif args.command == "sweep":
            values = [v for v in args.values.split(",") if v]
            cmd_sweep(_load_experiment(args), values)
        elif args.command == "report":
            cmd_report(args.run, args.out)
        return EXIT_OK
    except (UsageError, ConfigError, DataError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (StageError, TrainingDiverged, GeneratorDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        print(f"unexpected error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
