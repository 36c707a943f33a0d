"""Static figure rendering for run reports.

Everything draws through the Agg backend straight to files, keyed off the
same report dicts the JSON/CSV writers consume, so a headless run can
produce its plots next to the delimited output. Figures carry no
timestamps; rendering the same report twice gives identical bytes.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import pca_projection

_FIGSIZE = (6.0, 4.5)
_DPI = 120
_COLORS = plt.get_cmap("tab10").colors


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def latent_scatter(path, groups: dict, title: str = "embedding projection") -> Path:
    """Scatter of the first two shared principal components, one color per
    group (insertion order fixes color and draw order)."""
    labels = list(groups)
    if not labels:
        raise ValueError("no groups to plot")
    arrays = [np.asarray(groups[lab], dtype=np.float64) for lab in labels]
    pooled = np.vstack(arrays)
    coords, _ = pca_projection(pooled, n_components=2)
    fig, ax = plt.subplots(figsize=_FIGSIZE)
    start = 0
    for k, (lab, arr) in enumerate(zip(labels, arrays)):
        stop = start + arr.shape[0]
        ax.scatter(coords[start:stop, 0], coords[start:stop, 1],
                   s=18, alpha=0.8, label=lab,
                   color=_COLORS[k % len(_COLORS)])
        start = stop
    ax.set_xlabel("component 1")
    ax.set_ylabel("component 2")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def effectiveness_bars(path, report: dict) -> Path:
    """Mean target hit-ratio at each cutoff, clean next to poisoned, with
    one-standard-deviation whiskers from the trial variance."""
    ks = report["k_list"]
    x = np.arange(len(ks), dtype=np.float64)
    width = 0.38
    fig, ax = plt.subplots(figsize=_FIGSIZE)
    for off, section, color in ((-width / 2, "clean", _COLORS[0]),
                                (width / 2, "poisoned", _COLORS[3])):
        means = [report["mean"][section][f"target_hit@{k}"] for k in ks]
        stds = [np.sqrt(report["variance"][section][f"target_hit@{k}"]) for k in ks]
        ax.bar(x + off, means, width, yerr=stds, capsize=3,
               label=section, color=color)
    ax.set_xticks(x, [f"K={k}" for k in ks])
    ax.set_ylabel("target hit ratio")
    ax.set_title("target exposure before and after injection")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def comparison_bars(path, labels, values, ylabel: str) -> Path:
    """One bar per run for a single scalar metric."""
    labels = list(labels)
    if not labels:
        raise ValueError("no runs to plot")
    fig, ax = plt.subplots(figsize=_FIGSIZE)
    x = np.arange(len(labels), dtype=np.float64)
    ax.bar(x, values, color=[_COLORS[i % len(_COLORS)] for i in range(len(labels))])
    ax.set_xticks(x, labels, rotation=20, ha="right")
    ax.set_ylabel(ylabel)
    ax.set_title("run comparison")
    fig.tight_layout()
    return _save(fig, path)


def sweep_curves(path, rows) -> Path:
    """Regularization sweep: target hit ratio and fake-profile log-det
    covariance against the dispersion weight. Rows whose values are None
    (failed runs) drop out of the corresponding curve."""
    rows = list(rows)
    if not rows:
        raise ValueError("no sweep rows to plot")
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(6.0, 6.0), sharex=True)
    for ax, key, label, color in ((top, "target_hit", "target hit ratio", _COLORS[3]),
                                  (bottom, "logdet", "log-det covariance", _COLORS[0])):
        pts = [(r["lam_disp"], r[key]) for r in rows if r.get(key) is not None]
        if pts:
            xs, ys = zip(*pts)
            ax.plot(xs, ys, marker="o", color=color)
        ax.set_ylabel(label)
        ax.grid(True, alpha=0.3)
    bottom.set_xlabel("dispersion weight")
    top.set_title("dispersion sweep")
    fig.tight_layout()
    return _save(fig, path)
