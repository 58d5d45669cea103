"""True-vs-predicted scatters, error histograms and state violin plots.

Every PNG is written next to a CSV sidecar holding the plotted data.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .episode import DIMENSIONS  # noqa: E402

HIST_BINS = 41


def _write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([f"{v:.9g}" if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def error_bins(errors: np.ndarray, bins: int = HIST_BINS) -> np.ndarray:
    """Symmetric bin edges around zero; zero falls in the middle bin."""
    half = float(np.max(np.abs(errors))) if len(errors) else 0.0
    half = half * 1.001 if half > 0 else 1.0
    return np.linspace(-half, half, bins + 1)


def emit_plots(pred, target, out_dir, prefix: str = "", title: str = "") -> list[Path]:
    """Scatter with identity line and error histogram for each dimension (6 PNGs)."""
    pred, target = np.asarray(pred, float), np.asarray(target, float)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, dim in enumerate(DIMENSIONS):
        t, p = target[:, i], pred[:, i]
        err = p - t

        scatter = out / f"{prefix}scatter_{dim}.png"
        _write_csv(scatter.with_suffix(".csv"), ["true", "predicted", "error"], zip(t, p, err))
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.scatter(t, p, s=4, alpha=0.5)
        lo = float(min(t.min(), p.min())) if len(t) else -1.0
        hi = float(max(t.max(), p.max())) if len(t) else 1.0
        ax.plot([lo, hi], [lo, hi], "k--", lw=1)
        ax.set_xlabel(f"true {dim}")
        ax.set_ylabel(f"predicted {dim}")
        ax.set_title(f"{title} {dim}".strip())
        fig.tight_layout()
        fig.savefig(scatter, dpi=100)
        plt.close(fig)

        hist = out / f"{prefix}error_hist_{dim}.png"
        edges = error_bins(err)
        counts, _ = np.histogram(err, bins=edges)
        _write_csv(hist.with_suffix(".csv"), ["bin_left", "bin_right", "count"],
                   zip(edges[:-1], edges[1:], counts.tolist()))
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.stairs(counts, edges, fill=True)
        ax.set_xlabel(f"{dim} error (predicted - true)")
        ax.set_ylabel("count")
        ax.set_title(f"{title} {dim}".strip())
        fig.tight_layout()
        fig.savefig(hist, dpi=100)
        plt.close(fig)
        written += [scatter, hist]
    return written


def violin_plots(split_states: dict, out_dir, name: str = "violin") -> Path:
    """Distribution of raw states per split, one panel per dimension.

    ``split_states`` maps a split name to an ``(M, 3)`` array of raw states.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = list(split_states)
    rows = []
    for s in names:
        x = np.asarray(split_states[s], float)
        for i, dim in enumerate(DIMENSIONS):
            q1, med, q3 = np.percentile(x[:, i], [25, 50, 75])
            rows.append([s, dim, len(x), x[:, i].mean(), x[:, i].std(), x[:, i].min(), q1, med, q3,
                         x[:, i].max()])
    _write_csv(out / f"{name}.csv",
               ["split", "dimension", "n", "mean", "std", "min", "q1", "median", "q3", "max"], rows)

    fig, axes = plt.subplots(1, 3, figsize=(10, 3.5))
    for i, (ax, dim) in enumerate(zip(axes, DIMENSIONS)):
        data = [np.asarray(split_states[s], float)[:, i] for s in names]
        ax.violinplot(data, showmedians=True)
        ax.set_xticks(range(1, len(names) + 1), names)
        ax.set_title(dim)
    fig.tight_layout()
    path = out / f"{name}.png"
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
