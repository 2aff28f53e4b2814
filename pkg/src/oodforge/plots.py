"""Figures for the report command. Everything renders off-screen to files."""
from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "savefig.dpi": 150,
}


def fig_size(width: float = 6.0, ratio: float | None = None):
    ratio = ratio or (math.sqrt(5) - 1.0) / 2.0
    return width, width * ratio


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    # fixed metadata keeps the files reproducible
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def accuracy_bars(summary_rows, path) -> Path:
    """Grouped bars of mean test accuracy with standard-error whiskers, one panel per selection rule."""
    rules = sorted({r["selection_rule"] for r in summary_rows})
    envs = sorted({r["test_env"] for r in summary_rows if r["test_env"] != "Average"}) + ["Average"]
    algs = sorted({r["algorithm"] for r in summary_rows})
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, max(len(rules), 1), figsize=fig_size(4.0 * max(len(rules), 1), 0.7), squeeze=False)
        width = 0.8 / max(len(algs), 1)
        xs = np.arange(len(envs))
        for ax, rule in zip(axes[0], rules):
            for i, alg in enumerate(algs):
                cells = {r["test_env"]: r for r in summary_rows if r["algorithm"] == alg and r["selection_rule"] == rule}
                means = [cells[e]["mean"] if e in cells else np.nan for e in envs]
                errs = [cells[e]["stderr"] if e in cells else 0.0 for e in envs]
                ax.bar(xs + (i - (len(algs) - 1) / 2) * width, means, width, yerr=errs, label=alg, capsize=2)
            ax.set_xticks(xs, envs, rotation=20)
            ax.set_ylim(0, 100)
            ax.set_ylabel("test accuracy (%)")
            ax.set_title(rule.replace("_", " "))
        axes[0][0].legend()
        return _save(fig, path)


def batch_size_scatter(records, slopes: dict, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=fig_size(4.5))
        by_env: dict[str, list] = {}
        for r in records:
            by_env.setdefault(r.test_env, []).append(r)
        for env, rs in sorted(by_env.items()):
            bs = np.array([r.schema_row()["batch_size"] for r in rs], dtype=float)
            acc = np.array([r.accuracy for r in rs])
            pts = ax.scatter(bs, acc, s=12, label=env)
            slope = slopes.get(env)
            if slope is not None:
                grid = np.linspace(bs.min(), bs.max(), 2)
                ax.plot(grid, acc.mean() + slope * (grid - bs.mean()), color=pts.get_facecolor()[0], lw=1)
        ax.set_xscale("log", base=2)
        ax.set_xlabel("batch size")
        ax.set_ylabel("test accuracy (%)")
        if by_env:
            ax.legend()
        return _save(fig, path)


def training_curves(history, path, title: str = "") -> Path:
    """Per-split accuracy over eval points."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=fig_size(4.5))
        series: dict[str, list] = {}
        for e in history.evals:
            series.setdefault(e["split"], []).append((e["iteration"], e["accuracy"]))
        for split, pts in sorted(series.items()):
            it, acc = zip(*pts)
            ax.plot(it, acc, marker=".", label=split)
        ax.set_xlabel("iteration")
        ax.set_ylabel("accuracy (%)")
        if title:
            ax.set_title(title)
        if series:
            ax.legend()
        return _save(fig, path)
