"""Figure rendering for error sweeps, ratings, training curves and alert timelines.

All figures are written with the non-interactive Agg backend and without
a software/date stamp, so identical inputs give identical PNG bytes.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.dates as mdates  # noqa: E402
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 0.8,
}
ATTACK_COLOR = "#d62728"
ALERT_COLOR = "#ff7f0e"
PNG_METADATA = {"Software": None}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata=PNG_METADATA)
    plt.close(fig)
    return path


def _to_num(ts) -> np.ndarray:
    return mdates.date2num(np.asarray(ts, dtype="datetime64[s]").astype("datetime64[us]").astype(object))


def _shade(ax, spans, color, label):
    for i, (lo, hi) in enumerate(spans):
        ax.axvspan(_to_num([lo])[0], _to_num([hi])[0], color=color, alpha=0.18, lw=0,
                   label=label if i == 0 else None)


def plot_errors(errors, path, ratings=None, labels=None, alerts=None, threshold: float = 0.3,
                title: str | None = None) -> Path:
    """Distance sweep (and rating, when given) with attack windows shaded."""
    with plt.rc_context(STYLE):
        rows = 2 if ratings is not None else 1
        fig, axes = plt.subplots(rows, 1, figsize=(10, 2.6 * rows), sharex=True, squeeze=False)
        ax = axes[0, 0]
        ax.plot(_to_num(errors.timestamps), errors.distance, color="#1f77b4", label="distance D")
        ax.set_ylabel("D (4-norm)")
        spans = [(a.start, a.end) for a in labels or []]
        _shade(ax, spans, ATTACK_COLOR, "attack")
        ax.set_title(title or f"process {errors.process_id}: prediction error")
        if ratings is not None:
            ax2 = axes[1, 0]
            ax2.plot(_to_num(ratings.timestamps), ratings.rating, color="#2ca02c", label="rating S")
            ax2.axhline(threshold, color="gray", ls="--", lw=0.8, label="threshold")
            ax2.set_ylim(-0.02, 1.05)
            ax2.set_ylabel("S")
            _shade(ax2, spans, ATTACK_COLOR, "attack")
            _shade(ax2, [(a.start, a.end) for a in alerts or []], ALERT_COLOR, "alert")
            ax2.legend(loc="upper right")
        axes[-1, 0].xaxis.set_major_formatter(mdates.DateFormatter("%m-%d %H:%M"))
        ax.legend(loc="upper right")
        fig.tight_layout()
        return _save(fig, path)


def plot_tag_errors(errors, path, tags: list[str] | None = None) -> Path:
    """One panel per tag residual."""
    tags = tags or errors.tags
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(tags), 1, figsize=(10, 1.4 * len(tags) + 0.6), sharex=True,
                                 squeeze=False)
        x = _to_num(errors.timestamps)
        for ax, tag in zip(axes[:, 0], tags):
            ax.plot(x, errors.per_tag[:, errors.tags.index(tag)], color="#1f77b4")
            ax.set_ylabel(tag, rotation=0, ha="right", va="center")
        axes[-1, 0].xaxis.set_major_formatter(mdates.DateFormatter("%m-%d %H:%M"))
        fig.tight_layout()
        return _save(fig, path)


def plot_loss(histories: dict[str, list[float]], path) -> Path:
    """Per-epoch training loss curves on a log scale."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for name, hist in sorted(histories.items()):
            ax.plot(np.arange(1, len(hist) + 1), hist, marker=".", label=name)
        ax.set_yscale("log")
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean MSE")
        ax.legend()
        fig.tight_layout()
        return _save(fig, path)


def plot_timeline(alerts, labels, processes: list[int], path) -> Path:
    """Alert intervals per process model against attack windows."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(10, 0.6 * len(processes) + 1.6))
        for a in labels:
            lo, hi = _to_num([a.start, a.end])
            ax.axvspan(lo, hi, color=ATTACK_COLOR, alpha=0.18, lw=0)
            ax.text(lo, len(processes) + 0.1, str(a.id), fontsize=7, color=ATTACK_COLOR)
        for row, p in enumerate(processes):
            spans = [(lo, max(hi - lo, 1 / 86400)) for lo, hi in
                     (_to_num([x.start, x.end]) for x in alerts if x.process_id == p)]
            ax.broken_barh(spans, (row + 0.25, 0.5), color=ALERT_COLOR)
        ax.set_yticks(np.arange(len(processes)) + 0.5)
        ax.set_yticklabels([f"P{p}" for p in processes])
        ax.set_ylim(0, len(processes) + 0.5)
        if labels:
            lo = min(_to_num([a.start for a in labels]))
            hi = max(_to_num([a.end for a in labels]))
            pad = (hi - lo) * 0.05 + 1 / 24
            ax.set_xlim(lo - pad, hi + pad)
        ax.xaxis.set_major_formatter(mdates.DateFormatter("%m-%d %H:%M"))
        ax.set_title("alerts by process model (attacks shaded)")
        fig.tight_layout()
        return _save(fig, path)
