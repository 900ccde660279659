"""Report figures (written to files with the Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
    "svg.hashsalt": "decred",  # stable ids in svg output
}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata so repeated runs write identical files
    meta = {"Software": None} if path.suffix == ".png" else {"Date": None} if path.suffix in (".svg", ".pdf") else None
    fig.savefig(path, metadata=meta)
    plt.close(fig)
    return path


def wer_bars(scores, path: str | Path, title: str = "WER by dataset") -> Path:
    """Bars of corpus WER with bootstrap intervals; ``scores`` are DatasetScore objects."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(max(3.0, 0.9 * len(scores) + 1.5), 2.8))
        x = np.arange(len(scores))
        w = np.array([100 * s.result.wer for s in scores])
        lo = np.array([100 * s.ci[0] for s in scores])
        hi = np.array([100 * s.ci[1] for s in scores])
        ax.bar(x, w, color="0.6", width=0.6)
        ax.errorbar(x, w, yerr=[np.maximum(w - lo, 0), np.maximum(hi - w, 0)], fmt="none", ecolor="k", capsize=3, lw=1)
        ax.set_xticks(x, [s.name for s in scores])
        ax.set_ylabel("WER [%]")
        ax.set_title(title)
        return _save(fig, path)


def grouped_bars(rows: Mapping[str, Mapping[str, float]], path: str | Path, ylabel: str, title: str = "") -> Path:
    """One group per column key, one bar per row key (e.g. ILM perplexity per model and dataset)."""
    groups = sorted({k for r in rows.values() for k in r})
    names = list(rows)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(max(3.0, 1.2 * len(groups) + 1.5), 2.8))
        width = 0.8 / max(len(names), 1)
        x = np.arange(len(groups))
        for i, n in enumerate(names):
            vals = [rows[n].get(g, np.nan) for g in groups]
            ax.bar(x + (i - (len(names) - 1) / 2) * width, vals, width=width, label=n)
        ax.set_xticks(x, groups)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
        return _save(fig, path)


def ablation_heatmap(report, path: str | Path) -> Path:
    """Mean WER per (position, weight) cell, annotated with the spread over seeds."""
    positions = sorted({c.position for c in report.cells})
    weights = sorted({c.weight for c in report.cells})
    grid = np.array([[100 * report.cell(p, w).mean for w in weights] for p in positions])
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(1.1 * len(weights) + 1.8, 0.7 * len(positions) + 1.4))
        im = ax.imshow(grid, cmap="Greys", aspect="auto")
        for i, p in enumerate(positions):
            for j, w in enumerate(weights):
                c = report.cell(p, w)
                shade = "w" if grid[i, j] > grid.mean() else "k"
                ax.text(j, i, f"{100 * c.mean:.1f}\n[{100 * c.std:.2f}]", ha="center", va="center", color=shade,
                        fontsize=7)
        ax.set_xticks(range(len(weights)), [f"{w:g}" for w in weights])
        ax.set_yticks(range(len(positions)), [str(p) for p in positions])
        ax.set_xlabel("auxiliary weight")
        ax.set_ylabel("auxiliary position")
        fig.colorbar(im, ax=ax, label="WER [%]")
        return _save(fig, path)


def speed_tradeoff(names: Sequence[str], seconds: Sequence[float], wers: Sequence[float], path: str | Path) -> Path:
    """Mean seconds per utterance against WER, one point per decoding configuration."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(3.6, 2.8))
        ax.scatter(1000 * np.asarray(seconds), 100 * np.asarray(wers), color="k", s=14)
        for n, s, w in zip(names, seconds, wers):
            ax.annotate(n, (1000 * s, 100 * w), textcoords="offset points", xytext=(4, 3), fontsize=7)
        ax.set_xlabel("time per utterance [ms]")
        ax.set_ylabel("WER [%]")
        return _save(fig, path)


def loss_curves(steps: Sequence[int], series: Mapping[str, Sequence[float]], path: str | Path) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.0, 2.8))
        for name, vals in series.items():
            ax.plot(steps, vals, lw=1, label=name)
        ax.set_xlabel("update step")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.legend(frameon=False)
        return _save(fig, path)
