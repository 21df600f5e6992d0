"""Matplotlib renderings of the evaluation tables.

These back the CLI's report path only: the metric computations live in
:mod:`beyondct.metrics` and stay figure-free, while every function here
takes already-computed results and writes a PNG next to the delimited
tables.  The Agg backend is forced so rendering works headless.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .metrics import BlandAltmanResult, ConfusionResult, PredictionPair

__all__ = [
    "scatter_figure",
    "bland_altman_figure",
    "cdf_figure",
    "confusion_figure",
    "comparison_figure",
]

_DPI = 130


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def scatter_figure(
    pairs: Sequence[PredictionPair], path: str | Path, target_label: str = "volume (L)"
) -> Path:
    """Actual-vs-predicted scatter with the identity line."""
    actual = [p.actual for p in pairs]
    predicted = [p.predicted for p in pairs]
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(actual, predicted, s=18, alpha=0.7, edgecolors="none")
    lo = min(min(actual), min(predicted))
    hi = max(max(actual), max(predicted))
    pad = 0.05 * (hi - lo or 1.0)
    ax.plot([lo - pad, hi + pad], [lo - pad, hi + pad], "k--", linewidth=1)
    ax.set_xlim(lo - pad, hi + pad)
    ax.set_ylim(lo - pad, hi + pad)
    ax.set_xlabel(f"actual {target_label}")
    ax.set_ylabel(f"predicted {target_label}")
    ax.set_title(f"Actual vs. predicted (n={len(pairs)})")
    return _save(fig, path)


def bland_altman_figure(result: BlandAltmanResult, path: str | Path) -> Path:
    """Difference-vs-mean plot with bias and limit-of-agreement lines."""
    means = [m for m, _ in result.points]
    diffs = [d for _, d in result.points]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.scatter(means, diffs, s=18, alpha=0.7, edgecolors="none")
    for level, style, label in (
        (result.mean_diff, "-", f"bias {result.mean_diff:+.3f}"),
        (result.loa_low, "--", f"-1.96 SD {result.loa_low:+.3f}"),
        (result.loa_high, "--", f"+1.96 SD {result.loa_high:+.3f}"),
    ):
        ax.axhline(level, linestyle=style, color="crimson", linewidth=1)
        ax.annotate(
            label, xy=(1.0, level), xycoords=("axes fraction", "data"),
            xytext=(-4, 2), textcoords="offset points", ha="right", fontsize=8,
        )
    ax.set_xlabel("mean of actual and predicted (L)")
    ax.set_ylabel("predicted - actual (L)")
    ax.set_title("Agreement")
    return _save(fig, path)


def cdf_figure(table: Sequence[tuple[float, float]], path: str | Path) -> Path:
    """Cumulative distribution of per-sample percent error."""
    thresholds = [t for t, _ in table]
    fractions = [f for _, f in table]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.step(thresholds, fractions, where="post")
    ax.set_xlabel("percent error (%)")
    ax.set_ylabel("fraction of scans at or below")
    ax.set_ylim(0.0, 1.05)
    ax.set_title("Cumulative error distribution")
    ax.grid(True, alpha=0.3)
    return _save(fig, path)


def confusion_figure(result: ConfusionResult, path: str | Path) -> Path:
    """Stage confusion matrix as an annotated heatmap."""
    counts = [list(row) for row in result.counts]
    n = len(result.stages)
    fig, ax = plt.subplots(figsize=(5.5, 5))
    image = ax.imshow(counts, cmap="Blues")
    ax.set_xticks(range(n), result.stages)
    ax.set_yticks(range(n), result.stages)
    ax.set_xlabel("predicted stage")
    ax.set_ylabel("actual stage")
    peak = max(max(row) for row in counts) or 1
    for i in range(n):
        for j in range(n):
            ax.text(
                j, i, str(counts[i][j]), ha="center", va="center",
                color="white" if counts[i][j] > peak / 2 else "black", fontsize=9,
            )
    bits = []
    if result.sensitivity is not None:
        bits.append(f"sensitivity {100 * result.sensitivity:.1f}%")
    if result.specificity is not None:
        bits.append(f"specificity {100 * result.specificity:.1f}%")
    ax.set_title("Stage confusion" + (f" ({', '.join(bits)})" if bits else ""))
    fig.colorbar(image, ax=ax, shrink=0.8)
    return _save(fig, path)


def comparison_figure(
    runs: Sequence[Mapping[str, object]], path: str | Path
) -> Path:
    """Side-by-side MAE and percent-error bars for merged runs."""
    labels = [str(r["label"]) for r in runs]
    mae_values = [float(r["mae_l"]) for r in runs]
    pct_values = [float(r["pct_error"]) for r in runs]
    fig, (ax_mae, ax_pct) = plt.subplots(1, 2, figsize=(9, 4))
    positions = range(len(runs))
    ax_mae.bar(positions, mae_values, color="steelblue")
    ax_mae.set_xticks(list(positions), labels, rotation=20, ha="right")
    ax_mae.set_ylabel("MAE (L)")
    ax_mae.set_title("Mean absolute error")
    ax_pct.bar(positions, pct_values, color="darkseagreen")
    ax_pct.set_xticks(list(positions), labels, rotation=20, ha="right")
    ax_pct.set_ylabel("percent error (%)")
    ax_pct.set_title("Percent error")
    return _save(fig, path)
