"""Anomaly rating from distance streams and alert extraction.

Every second the last ``W_r`` distances are summed after dropping the ``k``
largest; the last ``N`` such sums form a history whose high and low
percentiles ``H`` and ``L`` give the rating ``S = min(H / (L * R), 1)``.
"""

from __future__ import annotations

import bisect
import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

from .scoring import ErrorSeries

YES, NOT_SURE, NO = "yes", "not_sure", "no"


@dataclass
class RatingConfig:
    sum_window_seconds: int = 60
    outliers_removed: int = 5
    history_size: int = 120
    high_percentile: float = 90.0
    low_percentile: float = 20.0
    ratio_divisor: float = 20.0
    alert_threshold: float = 0.3
    merge_gap_seconds: int = 300

    def __post_init__(self):
        if not 0 <= self.outliers_removed < self.sum_window_seconds:
            raise ValueError("need 0 <= outliers_removed < sum_window_seconds")
        if not 0 < self.low_percentile < self.high_percentile <= 100:
            raise ValueError("need 0 < low_percentile < high_percentile <= 100")
        if self.ratio_divisor <= 0:
            raise ValueError("ratio_divisor must be positive")
        if not 0 < self.alert_threshold <= 1:
            raise ValueError("alert_threshold must lie in (0, 1]")
        if self.history_size < 1 or self.merge_gap_seconds < 0:
            raise ValueError("history_size must be >= 1 and merge_gap_seconds >= 0")

    @property
    def warmup(self) -> int:
        """Distances consumed before the first rating."""
        return self.sum_window_seconds + self.history_size - 1


def trimmed_window_sum(distances, k: int) -> float:
    """Sum of ``distances`` without its ``k`` largest values."""
    values = sorted((float(v) for v in distances), reverse=True)
    if len(values) <= k:
        raise ValueError("window must hold more than k values")
    return math.fsum(values[k:])


def _rank(n: int, q: float) -> int:
    # round() guards q * n / 100 against representation error before ceil
    return min(max(1, math.ceil(round(q * n / 100.0, 9))), n)


def percentile(values, q: float) -> float:
    """Nearest-rank percentile: the ceil(q * N / 100)-th smallest value."""
    values = sorted(float(v) for v in values)
    if not values:
        raise ValueError("percentile of empty input")
    return values[_rank(len(values), q) - 1]


def rating_from(high: float, low: float, divisor: float) -> float:
    if low == 0:
        return 1.0 if high > 0 else 0.0
    return min(high / (low * divisor), 1.0)


def rating(history, config: RatingConfig) -> float:
    """Rating of a full history of trimmed sums."""
    history = list(history)
    if len(history) != config.history_size:
        raise ValueError(f"history holds {len(history)} sums, need {config.history_size}")
    return rating_from(
        percentile(history, config.high_percentile),
        percentile(history, config.low_percentile),
        config.ratio_divisor,
    )


def confidence(peak: float, threshold: float) -> str:
    if peak >= 1.0:
        return YES
    if peak >= threshold:
        return NOT_SURE
    return NO


class _SortedWindow:
    """Fixed-capacity FIFO that also keeps its contents sorted."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.fifo: deque[float] = deque()
        self.sorted: list[float] = []

    def push(self, value: float) -> None:
        if len(self.fifo) == self.capacity:
            old = self.fifo.popleft()
            del self.sorted[bisect.bisect_left(self.sorted, old)]
        self.fifo.append(value)
        bisect.insort(self.sorted, value)

    @property
    def full(self) -> bool:
        return len(self.fifo) == self.capacity


@dataclass
class RatingStep:
    window_sum: float
    high: float
    low: float
    rating: float


class StreamingRater:
    """Single-stream rating state machine; push one distance per second."""

    def __init__(self, config: RatingConfig):
        self.config = config
        self._window = _SortedWindow(config.sum_window_seconds)
        self._history = _SortedWindow(config.history_size)
        self._hi_rank = _rank(config.history_size, config.high_percentile)
        self._lo_rank = _rank(config.history_size, config.low_percentile)

    def push(self, distance: float) -> RatingStep | None:
        c = self.config
        self._window.push(float(distance))
        if not self._window.full:
            return None
        total = math.fsum(self._window.sorted[: c.sum_window_seconds - c.outliers_removed])
        self._history.push(total)
        if not self._history.full:
            return None
        hist = self._history.sorted
        high, low = hist[self._hi_rank - 1], hist[self._lo_rank - 1]
        return RatingStep(total, high, low, rating_from(high, low, c.ratio_divisor))


@dataclass
class RatingSeries:
    timestamps: np.ndarray
    window_sum: np.ndarray
    high: np.ndarray
    low: np.ndarray
    rating: np.ndarray
    process_id: int = 0

    def __len__(self) -> int:
        return len(self.rating)


@dataclass
class AlertEvent:
    process_id: int
    start: datetime
    end: datetime
    peak_rating: float
    confidence: str
    attributed_tags: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        d = asdict(self)
        d["start"] = self.start.isoformat()
        d["end"] = self.end.isoformat()
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "AlertEvent":
        return cls(
            int(d["process_id"]),
            datetime.fromisoformat(d["start"]),
            datetime.fromisoformat(d["end"]),
            float(d["peak_rating"]),
            d["confidence"],
            list(d.get("attributed_tags", [])),
        )


def _to_datetime(ts: np.datetime64) -> datetime:
    return ts.astype("datetime64[s]").astype(object)


def rate_series(errors: ErrorSeries, config: RatingConfig) -> RatingSeries:
    if len(errors) < config.sum_window_seconds + config.history_size:
        raise ValueError(
            f"series too short: {len(errors)} s, need {config.sum_window_seconds + config.history_size}"
        )
    rater = StreamingRater(config)
    steps = [rater.push(d) for d in errors.distance.tolist()]
    first = config.warmup
    rows = steps[first:]
    return RatingSeries(
        errors.timestamps[first:],
        np.array([r.window_sum for r in rows]),
        np.array([r.high for r in rows]),
        np.array([r.low for r in rows]),
        np.array([r.rating for r in rows]),
        errors.process_id,
    )


def extract_alerts(ratings: RatingSeries, config: RatingConfig) -> list[AlertEvent]:
    """Runs of ``S >= threshold``, merged when separated by less than the merge gap."""
    above = ratings.rating >= config.alert_threshold
    runs = []
    i, n = 0, len(above)
    while i < n:
        if not above[i]:
            i += 1
            continue
        j = i
        while j + 1 < n and above[j + 1]:
            j += 1
        runs.append([i, j])
        i = j + 1
    merged: list[list[int]] = []
    ts = ratings.timestamps.astype(np.int64)
    for run in runs:
        if merged and ts[run[0]] - ts[merged[-1][1]] < config.merge_gap_seconds:
            merged[-1][1] = run[1]
        else:
            merged.append(run)
    alerts = []
    for lo, hi in merged:
        peak = float(ratings.rating[lo:hi + 1].max())
        alerts.append(AlertEvent(
            ratings.process_id,
            _to_datetime(ratings.timestamps[lo]),
            _to_datetime(ratings.timestamps[hi]),
            peak,
            confidence(peak, config.alert_threshold),
        ))
    return alerts


def attribute_tags(errors: ErrorSeries, alert: AlertEvent, top: int = 2) -> list[str]:
    """Tags ranked by summed |residual| over the alert; ties keep schema order."""
    rows = errors.span(alert.start, alert.end)
    mass = np.abs(errors.per_tag[rows]).sum(axis=0)
    order = sorted(range(len(errors.tags)), key=lambda j: (-mass[j], j))
    return [errors.tags[j] for j in order[:top]]


def detect(errors: ErrorSeries, config: RatingConfig) -> tuple[RatingSeries, list[AlertEvent]]:
    ratings = rate_series(errors, config)
    alerts = extract_alerts(ratings, config)
    for a in alerts:
        a.attributed_tags = attribute_tags(errors, a)
    return ratings, alerts


def write_alerts(alerts: list[AlertEvent], path: str | Path) -> None:
    ordered = sorted(alerts, key=lambda a: (a.start, a.process_id))
    Path(path).write_text("".join(a.to_json() + "\n" for a in ordered))


def read_alerts(path: str | Path) -> list[AlertEvent]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(AlertEvent.from_dict(json.loads(line)))
        except (KeyError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: bad alert record: {exc}") from None
    return out


def write_ratings(ratings: RatingSeries, path: str | Path) -> None:
    ts = np.datetime_as_string(ratings.timestamps, unit="s")
    with open(path, "w") as fh:
        fh.write("timestamp,sum,S\n")
        for t, s, r in zip(ts, ratings.window_sum.tolist(), ratings.rating.tolist()):
            fh.write(f"{t},{s!r},{r!r}\n")


def read_ratings(path: str | Path, process_id: int = 0) -> RatingSeries:
    import pandas as pd

    frame = pd.read_csv(path, float_precision="round_trip")
    ts = pd.to_datetime(frame["timestamp"], format="ISO8601").to_numpy().astype("datetime64[s]")
    nan = np.full(len(frame), np.nan)
    return RatingSeries(ts, frame["sum"].to_numpy(float), nan, nan.copy(), frame["S"].to_numpy(float),
                        process_id)
