"""Tag schemas, CSV ingest, min-max normalization and sliding windows."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import pandas as pd

WINDOW = 100
ENCODER_LEN = 90
HINT_LEN = 9

SENSOR = "sensor"
ACTUATOR = "actuator"

# Tag-name prefixes that denote actuators in SWaT-style naming.
ACTUATOR_PREFIXES = ("MV", "P", "UV")

LABEL_COLUMNS = ("label", "normal/attack")

_SUFFIX = re.compile(r"(\d)\d*$")


class DataError(ValueError):
    """Raised for malformed or inconsistent operational data."""


def process_of(name: str) -> int:
    """Process id from the first digit of a tag's numeric suffix (MV-101 -> 1)."""
    m = _SUFFIX.search(name.strip())
    if m is None:
        raise DataError(f"tag {name!r} has no numeric suffix")
    return int(m.group(1))


def kind_of(name: str) -> str:
    prefix = re.match(r"[A-Za-z]+", name.strip())
    if prefix and prefix.group(0).upper() in ACTUATOR_PREFIXES:
        return ACTUATOR
    return SENSOR


@dataclass(frozen=True)
class Tag:
    name: str
    kind: str
    process_id: int


@dataclass(frozen=True)
class TagSchema:
    tags: tuple[Tag, ...]

    def __post_init__(self):
        names = [t.name for t in self.tags]
        if len(set(names)) != len(names):
            raise DataError("duplicate tag names in schema")
        for t in self.tags:
            if t.kind not in (SENSOR, ACTUATOR):
                raise DataError(f"tag {t.name}: kind must be sensor or actuator")
            if t.process_id < 1:
                raise DataError(f"tag {t.name}: process id must be >= 1")

    @classmethod
    def from_names(cls, names: Sequence[str]) -> "TagSchema":
        """Infer kinds and processes from SWaT-style tag names."""
        return cls(tuple(Tag(n.strip(), kind_of(n), process_of(n)) for n in names))

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.tags]

    @property
    def processes(self) -> list[int]:
        return sorted({t.process_id for t in self.tags})

    def process_tags(self, process_id: int) -> list[str]:
        return [t.name for t in self.tags if t.process_id == process_id]

    def index(self, name: str) -> int:
        return self.names.index(name)

    def subset(self, names: Sequence[str]) -> "TagSchema":
        by_name = {t.name: t for t in self.tags}
        return TagSchema(tuple(by_name[n] for n in names))

    def __len__(self) -> int:
        return len(self.tags)


def load_schema(path: str | Path) -> TagSchema:
    """Read a schema file: one ``name,kind,process`` line per tag."""
    tags = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected name,kind,process")
        if lineno == 1 and parts[2].lower() == "process":
            continue
        try:
            tags.append(Tag(parts[0], parts[1].lower(), int(parts[2])))
        except ValueError:
            raise DataError(f"{path}:{lineno}: bad process id {parts[2]!r}") from None
    return TagSchema(tuple(tags))


def write_schema(schema: TagSchema, path: str | Path) -> None:
    lines = [f"{t.name},{t.kind},{t.process_id}" for t in schema.tags]
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class TagSeries:
    """Per-second multi-tag frame.

    ``timestamps`` is a ``datetime64[s]`` vector, ``values`` a ``[T, n]`` float
    matrix in schema column order and ``labels`` an optional boolean vector
    that is True on attack seconds.
    """

    schema: TagSchema
    timestamps: np.ndarray
    values: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype="datetime64[s]")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.schema):
            raise DataError(
                f"values shape {self.values.shape} does not match {len(self.schema)} tags"
            )
        if len(self.timestamps) != len(self.values):
            raise DataError("timestamps and values differ in length")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=bool)
            if len(self.labels) != len(self.values):
                raise DataError("labels and values differ in length")
        check_timestamps(self.timestamps)
        if not np.all(np.isfinite(self.values)):
            raise DataError("non-finite tag values")

    def __len__(self) -> int:
        return len(self.values)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.schema.index(name)]

    def select(self, names: Sequence[str]) -> "TagSeries":
        idx = [self.schema.index(n) for n in names]
        return TagSeries(self.schema.subset(names), self.timestamps, self.values[:, idx], self.labels)

    def select_process(self, process_id: int) -> "TagSeries":
        names = self.schema.process_tags(process_id)
        if not names:
            raise DataError(f"no tags for process {process_id}")
        return self.select(names)

    def slice(self, start: int, stop: int) -> "TagSeries":
        labels = None if self.labels is None else self.labels[start:stop]
        return TagSeries(self.schema, self.timestamps[start:stop], self.values[start:stop], labels)


def check_timestamps(ts: np.ndarray) -> None:
    if len(ts) < 2:
        return
    step = np.diff(ts.astype(np.int64))
    if np.any(step <= 0):
        i = int(np.argmax(step <= 0))
        raise DataError(f"non-monotonic timestamps at row {i + 1}")
    if np.any(step != 1):
        i = int(np.argmax(step != 1))
        raise DataError(f"timestamp gap of {int(step[i])} s at row {i + 1}")


def _parse_timestamps(col: pd.Series, time_format: str | None) -> np.ndarray:
    if time_format is None and pd.api.types.is_numeric_dtype(col):
        return col.to_numpy(dtype=np.int64).astype("datetime64[s]")
    text = col.astype(str).str.strip()
    try:
        if time_format is None:
            parsed = pd.to_datetime(text, format="ISO8601")
        else:
            parsed = pd.to_datetime(text, format=time_format)
    except (ValueError, TypeError) as exc:
        raise DataError(f"unparseable timestamp: {exc}") from None
    if getattr(parsed.dt, "tz", None) is not None:
        parsed = parsed.dt.tz_convert("UTC").dt.tz_localize(None)
    return parsed.to_numpy().astype("datetime64[s]")


def _parse_labels(col: pd.Series) -> np.ndarray:
    text = col.astype(str).str.replace(" ", "", regex=False).str.lower()
    ok = text.isin(["normal", "attack"])
    if not ok.all():
        bad = text[~ok].iloc[0]
        raise DataError(f"unknown label value {bad!r}")
    return (text == "attack").to_numpy()


def load_csv(
    path: str | Path, schema: TagSchema | None = None, time_format: str | None = None
) -> TagSeries:
    """Read a per-second CSV: timestamp column, one column per tag, optional label.

    Without ``schema`` the tag columns are taken from the header and kinds and
    processes are inferred from SWaT-style names.
    """
    frame = pd.read_csv(path, skipinitialspace=True, float_precision="round_trip")
    frame.columns = [str(c).strip() for c in frame.columns]
    if frame.shape[1] < 2:
        raise DataError(f"{path}: need a timestamp column and at least one tag")
    label_col = next((c for c in frame.columns if c.lower() in LABEL_COLUMNS), None)
    tag_cols = [c for c in frame.columns[1:] if c != label_col]
    if schema is None:
        schema = TagSchema.from_names(tag_cols)
    missing = [n for n in schema.names if n not in frame.columns]
    if missing:
        raise DataError(f"{path}: missing tag column(s) {', '.join(missing)}")
    try:
        values = frame[schema.names].to_numpy(dtype=np.float64)
    except ValueError as exc:
        raise DataError(f"{path}: unparseable value: {exc}") from None
    timestamps = _parse_timestamps(frame.iloc[:, 0], time_format)
    labels = _parse_labels(frame[label_col]) if label_col else None
    return TagSeries(schema, timestamps, values, labels)


def write_csv(series: TagSeries, path: str | Path) -> None:
    frame = pd.DataFrame(series.values, columns=series.schema.names)
    frame.insert(0, "timestamp", np.datetime_as_string(series.timestamps, unit="s"))
    if series.labels is not None:
        frame["label"] = np.where(series.labels, "Attack", "Normal")
    frame.to_csv(path, index=False)


@dataclass
class NormStats:
    names: list[str]
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        self.min = np.asarray(self.min, dtype=np.float64)
        self.max = np.asarray(self.max, dtype=np.float64)
        if np.any(self.min > self.max):
            raise DataError("normalization min exceeds max")

    def subset(self, names: Sequence[str]) -> "NormStats":
        idx = [self.names.index(n) for n in names]
        return NormStats(list(names), self.min[idx], self.max[idx])

    def to_dict(self) -> dict:
        return {"names": list(self.names), "min": self.min.tolist(), "max": self.max.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(list(d["names"]), d["min"], d["max"])


def fit_norm_stats(train: TagSeries) -> NormStats:
    if len(train) == 0:
        raise DataError("cannot fit normalization on an empty series")
    return NormStats(train.schema.names, train.values.min(axis=0), train.values.max(axis=0))


def _aligned(stats: NormStats, schema: TagSchema) -> NormStats:
    try:
        return stats.subset(schema.names)
    except ValueError:
        missing = sorted(set(schema.names) - set(stats.names))
        raise DataError(f"normalization stats lack tag(s) {', '.join(missing)}") from None


def normalize(series: TagSeries, stats: NormStats) -> TagSeries:
    """Min-max scale to the training range, without clipping.

    A tag that was constant in training maps its training value to 0.5 and is
    otherwise shifted in raw units, so runtime changes stay visible.
    """
    s = _aligned(stats, series.schema)
    span = s.max - s.min
    const = span == 0
    out = (series.values - s.min) / np.where(const, 1.0, span)
    out[:, const] += 0.5
    return TagSeries(series.schema, series.timestamps, out, series.labels)


def denormalize(series: TagSeries, stats: NormStats) -> TagSeries:
    s = _aligned(stats, series.schema)
    const = s.max == s.min
    out = series.values * np.where(const, 1.0, s.max - s.min) + s.min
    out[:, const] -= 0.5
    return TagSeries(series.schema, series.timestamps, out, series.labels)


@dataclass
class WindowBatch:
    """Time-major slices of a batch of 100-second windows.

    ``encoder_input`` is ``[90, B, n]``, ``decoder_hint`` ``[9, B, n]`` and
    ``target`` ``[B, n]``. ``target_index`` holds the row of each target.
    """

    encoder_input: np.ndarray
    decoder_hint: np.ndarray
    target: np.ndarray
    target_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def size(self) -> int:
        return self.target.shape[0]


def window_count(n_rows: int) -> int:
    return max(n_rows - WINDOW + 1, 0)


def gather_windows(values: np.ndarray, starts: np.ndarray, dtype=np.float64) -> WindowBatch:
    """Build a batch from window start rows of a normalized ``[T, n]`` matrix."""
    starts = np.asarray(starts, dtype=np.int64)
    view = np.lib.stride_tricks.sliding_window_view(values, WINDOW, axis=0)  # [W, n, 100]
    win = view[starts].transpose(2, 0, 1).astype(dtype)  # [100, B, n]
    return WindowBatch(
        np.ascontiguousarray(win[:ENCODER_LEN]),
        np.ascontiguousarray(win[ENCODER_LEN:WINDOW - 1]),
        np.ascontiguousarray(win[WINDOW - 1]),
        starts + WINDOW - 1,
    )


def make_windows(
    series: TagSeries, process_id: int | None = None, batch_size: int = 1024, dtype=np.float64
) -> Iterator[WindowBatch]:
    """Stride-1 windows over a normalized series, in time order.

    Restricted to the tags of ``process_id`` when given.
    """
    if len(series) < WINDOW:
        raise DataError(f"series too short: {len(series)} rows, need {WINDOW}")
    if process_id is not None:
        series = series.select_process(process_id)
    n = window_count(len(series))
    for lo in range(0, n, batch_size):
        yield gather_windows(series.values, np.arange(lo, min(lo + batch_size, n)), dtype)
