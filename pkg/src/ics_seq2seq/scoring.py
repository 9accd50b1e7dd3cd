"""Per-second prediction errors and their p-norm distance."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import WINDOW, DataError, TagSeries, make_windows, normalize
from .seqmodel import SeqModelParams, predict


@dataclass
class ErrorSeries:
    """Residuals ``actual - predicted`` in normalized units and their distance."""

    timestamps: np.ndarray  # datetime64[s], one per scored (target) second
    tags: list[str]
    per_tag: np.ndarray  # [T', n]
    distance: np.ndarray  # [T']
    process_id: int = 0

    def __len__(self) -> int:
        return len(self.distance)

    def span(self, start, end) -> slice:
        """Row slice covering timestamps in the closed interval [start, end]."""
        lo = int(np.searchsorted(self.timestamps, np.datetime64(start, "s"), side="left"))
        hi = int(np.searchsorted(self.timestamps, np.datetime64(end, "s"), side="right"))
        return slice(lo, hi)


def residuals(actual, predicted) -> np.ndarray:
    a = np.asarray(actual, dtype=np.float64)
    p = np.asarray(predicted, dtype=np.float64)
    if a.shape != p.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {p.shape}")
    return a - p


def _int_power(a: np.ndarray, p: int) -> np.ndarray:
    out = a
    for _ in range(p - 1):
        out = out * a
    return out


def pnorm_distance(res, p: float = 4):
    """``(sum_i |d_i|^p)^(1/p)`` over the last axis.

    Tags are accumulated left to right and integer powers are formed by
    repeated multiplication, so a row gives the same bits whether scored
    alone or inside a sweep. ``p = inf`` gives the max norm.
    """
    d = np.abs(np.asarray(res, dtype=np.float64))
    if p < 1:
        raise ValueError("p must be >= 1")
    scalar = d.ndim == 1
    d = np.atleast_2d(d)
    if math.isinf(p):
        out = d.max(axis=-1) if d.shape[-1] else np.zeros(d.shape[0])
    else:
        integral = float(p).is_integer()
        acc = np.zeros(d.shape[0])
        for j in range(d.shape[1]):
            col = d[:, j]
            acc = acc + (_int_power(col, int(p)) if integral else np.power(col, p))
        inv = 1.0 / p
        out = np.array([math.pow(s, inv) for s in acc.tolist()])
    return float(out[0]) if scalar else out


def score_series(
    model: SeqModelParams, series: TagSeries, batch_size: int = 2048, p: float = 4
) -> ErrorSeries:
    """Score every stride-1 window of the model's process in ``series`` (raw units)."""
    if model.norm_stats is None:
        raise ValueError("model carries no normalization stats")
    tags = model.norm_stats.names
    sub = series.select(tags)
    if len(sub) < WINDOW:
        raise DataError(f"series too short: {len(sub)} rows, need {WINDOW}")
    norm = normalize(sub, model.norm_stats)
    dtype = np.dtype(model.config.dtype)
    preds = []
    for batch in make_windows(norm, None, batch_size, dtype):
        preds.append(predict(model, batch).astype(np.float64))
    pred = np.concatenate(preds)
    actual = norm.values[WINDOW - 1:]
    res = residuals(actual, pred)
    return ErrorSeries(norm.timestamps[WINDOW - 1:], list(tags), res, pnorm_distance(res, p),
                       model.config.process_id)


def write_errors(errors: ErrorSeries, path: str | Path) -> None:
    ts = np.datetime_as_string(errors.timestamps, unit="s")
    with open(path, "w") as fh:
        fh.write(",".join(["timestamp", "D"] + [f"d_{t}" for t in errors.tags]) + "\n")
        for i in range(len(errors)):
            row = [ts[i], repr(float(errors.distance[i]))]
            row += [repr(float(v)) for v in errors.per_tag[i]]
            fh.write(",".join(row) + "\n")


def read_errors(path: str | Path, process_id: int = 0) -> ErrorSeries:
    import pandas as pd

    frame = pd.read_csv(path, float_precision="round_trip")
    if list(frame.columns[:2]) != ["timestamp", "D"]:
        raise DataError(f"{path}: expected header timestamp,D,d_<tag>...")
    tags = [c[2:] for c in frame.columns[2:]]
    ts = pd.to_datetime(frame["timestamp"], format="ISO8601").to_numpy().astype("datetime64[s]")
    return ErrorSeries(ts, tags, frame.iloc[:, 2:].to_numpy(dtype=np.float64),
                       frame["D"].to_numpy(dtype=np.float64), process_id)
