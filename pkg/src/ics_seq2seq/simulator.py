"""Synthetic SWaT-shaped plant: a chain of tanks with valves, pumps and interlocks.

Each process ``k`` owns one tank and six tags::

    FIT-k01  inflow meter         MV-k01  inlet valve (1 closed, 2 open)
    LIT-k01  tank level           P-k01   outlet pump (1 off, 2 on)
    FIT-k02  outflow meter        AIT-k01 analyzer (slow drift)

Process 1 draws from a source through MV-101. Pump P-k01 can only push when
the downstream inlet valve MV-(k+1)01 is open; the last pump drains out of
the plant. Every valve and pump follows one hysteresis rule on its own
tank's level. Controllers act on true values, sensors add Gaussian noise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import ACTUATOR, SENSOR, Tag, TagSchema, TagSeries

OPEN, CLOSED = 2.0, 1.0

SENSOR_KINDS = ("sensor-freeze", "sensor-offset", "sensor-spoof-constant")
ACTUATOR_KINDS = ("actuator-force-open", "actuator-force-close")
MIN_ATTACK_SECONDS = 120


class SpecError(ValueError):
    """Invalid plant specification or attack script."""


@dataclass
class ProcessSpec:
    process_id: int
    capacity: float = 1000.0
    inflow_rate: float = 6.0  # source rate, process 1 only
    pump_rate: float = 5.0
    valve_low: float = 400.0  # inlet opens below
    valve_high: float = 800.0  # inlet closes above
    pump_on: float = 600.0  # pump starts above
    pump_off: float = 300.0  # pump stops below
    initial_level: float = 500.0
    analyzer_base: float = 7.0
    analyzer_amplitude: float = 0.5
    analyzer_period: float = 5400.0

    def tag(self, stem: str, gadget: int = 1) -> str:
        return f"{stem}-{self.process_id}{gadget:02d}"

    def tag_names(self) -> list[str]:
        return [self.tag("FIT"), self.tag("MV"), self.tag("LIT"), self.tag("P"),
                self.tag("FIT", 2), self.tag("AIT")]


@dataclass
class PlantSpec:
    processes: list[ProcessSpec]
    seed: int = 0
    start: str = "2024-01-01T00:00:00"
    noise_frac: float = 0.005  # sensor sigma as a fraction of the tag's range
    demand_variation: float = 0.05  # relative amplitude of source-rate drift

    def validate(self) -> None:
        if not self.processes:
            raise SpecError("plant has no processes")
        ids = [p.process_id for p in self.processes]
        if ids != list(range(1, len(ids) + 1)):
            raise SpecError("process ids must be 1..P in chain order")
        for p in self.processes:
            if p.capacity <= 0 or p.pump_rate < 0 or p.inflow_rate < 0:
                raise SpecError(f"process {p.process_id}: capacity must be > 0 and rates >= 0")
            if not p.valve_low <= p.valve_high or not p.pump_off <= p.pump_on:
                raise SpecError(f"process {p.process_id}: hysteresis bands are inverted")
            if not 0 <= p.initial_level <= p.capacity:
                raise SpecError(f"process {p.process_id}: initial level outside tank")
        if self.noise_frac < 0 or self.demand_variation < 0:
            raise SpecError("noise_frac and demand_variation must be >= 0")

    def schema(self) -> TagSchema:
        tags = []
        for p in self.processes:
            for name in p.tag_names():
                kind = ACTUATOR if name.startswith(("MV", "P-")) else SENSOR
                tags.append(Tag(name, kind, p.process_id))
        return TagSchema(tuple(tags))

    def noise_free(self) -> "PlantSpec":
        return PlantSpec(self.processes, self.seed, self.start, 0.0, 0.0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PlantSpec":
        d = dict(d)
        d["processes"] = [ProcessSpec(**p) for p in d["processes"]]
        return cls(**d)


def default_plant(seed: int = 0) -> PlantSpec:
    """Three processes, eighteen tags."""
    return PlantSpec(
        [
            ProcessSpec(1, inflow_rate=6.0, pump_rate=6.5, initial_level=520.0,
                        analyzer_base=7.2, analyzer_amplitude=0.4, analyzer_period=5400.0),
            ProcessSpec(2, pump_rate=6.5, pump_on=650.0, pump_off=250.0, initial_level=450.0,
                        analyzer_base=250.0, analyzer_amplitude=12.0, analyzer_period=7300.0),
            ProcessSpec(3, pump_rate=5.5, valve_low=350.0, valve_high=850.0, pump_on=500.0,
                        pump_off=200.0, initial_level=380.0, analyzer_base=30.0,
                        analyzer_amplitude=2.0, analyzer_period=4100.0),
        ],
        seed=seed,
    )


def load_plant(path: str | Path) -> PlantSpec:
    spec = PlantSpec.from_dict(json.loads(Path(path).read_text()))
    spec.validate()
    return spec


def save_plant(spec: PlantSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")


# -- attacks ---------------------------------------------------------------


@dataclass
class ScriptedAttack:
    start: int  # seconds from series start
    duration: int
    kind: str
    target: str
    magnitude: float = 0.0

    @property
    def end(self) -> int:
        """Last attacked second (inclusive)."""
        return self.start + self.duration - 1


@dataclass
class AttackScript:
    attacks: list[ScriptedAttack] = field(default_factory=list)

    def validate(self, schema: TagSchema | None = None, n_rows: int | None = None) -> None:
        for a in self.attacks:
            if a.kind not in SENSOR_KINDS + ACTUATOR_KINDS:
                raise SpecError(f"unknown attack kind {a.kind!r}")
            if a.duration < MIN_ATTACK_SECONDS:
                raise SpecError(f"attack on {a.target} lasts {a.duration} s; minimum is {MIN_ATTACK_SECONDS}")
            if a.start < 0 or (n_rows is not None and a.end >= n_rows):
                raise SpecError(f"attack on {a.target} falls outside the series")
            if schema is not None:
                if a.target not in schema.names:
                    raise SpecError(f"unknown attack target {a.target!r}")
                kind = schema.tags[schema.index(a.target)].kind
                if (kind == ACTUATOR) != (a.kind in ACTUATOR_KINDS):
                    raise SpecError(f"{a.kind} cannot target {kind} {a.target}")
        by_tag: dict[str, list[ScriptedAttack]] = {}
        for a in self.attacks:
            by_tag.setdefault(a.target, []).append(a)
        for tag, items in by_tag.items():
            items.sort(key=lambda a: a.start)
            for prev, nxt in zip(items, items[1:]):
                if nxt.start <= prev.end:
                    raise SpecError(f"overlapping attacks on {tag}")

    def to_dict(self) -> dict:
        return {"attacks": [asdict(a) for a in self.attacks]}

    @classmethod
    def from_dict(cls, d: dict) -> "AttackScript":
        return cls([ScriptedAttack(**a) for a in d.get("attacks", [])])


def load_script(path: str | Path) -> AttackScript:
    return AttackScript.from_dict(json.loads(Path(path).read_text()))


def save_script(script: AttackScript, path: str | Path) -> None:
    Path(path).write_text(json.dumps(script.to_dict(), indent=2) + "\n")


# -- dynamics --------------------------------------------------------------


def _tag_ranges(spec: PlantSpec) -> list[float]:
    out = []
    for p in spec.processes:
        flow_in = p.inflow_rate * (1 + spec.demand_variation) if p.process_id == 1 else None
        if flow_in is None:
            flow_in = spec.processes[p.process_id - 2].pump_rate
        out += [flow_in, 1.0, p.capacity, 1.0, p.pump_rate, 2 * p.analyzer_amplitude or 1.0]
    return out


def _demand(spec: PlantSpec, duration: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth multiplicative drift of the source rate (mean-reverting walk)."""
    if spec.demand_variation == 0:
        return np.ones(duration)
    shocks = rng.normal(size=duration)
    x = np.empty(duration)
    state, theta = 0.0, 1.0 / 600.0
    for t in range(duration):
        state += -theta * state + np.sqrt(2 * theta) * shocks[t]
        x[t] = state
    return 1.0 + spec.demand_variation * np.clip(x, -2.0, 2.0) / 2.0


def _run(spec: PlantSpec, duration: int, forced: dict[str, np.ndarray]) -> np.ndarray:
    """Noise-free trajectories ``[duration, 6P]``.

    ``forced`` maps actuator tags to per-second arrays holding the forced
    state, or NaN where the control rule is in charge.
    """
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed).spawn(2)[0])
    demand = _demand(spec, duration, rng)
    procs = spec.processes
    P = len(procs)
    level = np.array([p.initial_level for p in procs])
    valve = np.where(level < np.array([p.valve_high for p in procs]), OPEN, CLOSED)
    pump = np.where(level > np.array([p.pump_off for p in procs]), OPEN, CLOSED)
    out = np.empty((duration, 6 * P))
    t_axis = np.arange(duration)
    for t in range(duration):
        for k, p in enumerate(procs):
            if level[k] < p.valve_low:
                valve[k] = OPEN
            elif level[k] > p.valve_high:
                valve[k] = CLOSED
            if level[k] > p.pump_on:
                pump[k] = OPEN
            elif level[k] < p.pump_off:
                pump[k] = CLOSED
            for tag, arr in ((p.tag("MV"), valve), (p.tag("P"), pump)):
                f = forced.get(tag)
                if f is not None and not np.isnan(f[t]):
                    arr[k] = f[t]
        inflow = np.zeros(P)
        outflow = np.zeros(P)
        if valve[0] == OPEN:
            inflow[0] = procs[0].inflow_rate * demand[t]
        for k, p in enumerate(procs):
            downstream_open = k == P - 1 or valve[k + 1] == OPEN
            if pump[k] == OPEN and downstream_open:
                outflow[k] = min(p.pump_rate, level[k] + inflow[k])
            if k + 1 < P:
                inflow[k + 1] = outflow[k]
        for k, p in enumerate(procs):
            base = 6 * k
            out[t, base:base + 5] = (inflow[k], valve[k], level[k], pump[k], outflow[k])
        level = np.clip(level + inflow - outflow, 0.0, np.array([p.capacity for p in procs]))
    for k, p in enumerate(procs):
        phase = 2 * np.pi * t_axis / p.analyzer_period
        out[:, 6 * k + 5] = p.analyzer_base + p.analyzer_amplitude * np.sin(phase + 0.7 * k)
    return out


def _noise(spec: PlantSpec, duration: int, schema: TagSchema) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed).spawn(2)[1])
    draws = rng.normal(size=(duration, len(schema)))
    sigma = np.array(_tag_ranges(spec)) * spec.noise_frac
    sigma[[i for i, t in enumerate(schema.tags) if t.kind == ACTUATOR]] = 0.0
    return draws * sigma


def simulate(spec: PlantSpec, duration_s: int, _forced: dict[str, np.ndarray] | None = None) -> TagSeries:
    """Deterministic per-second plant trace; all labels Normal."""
    if duration_s < 1:
        raise SpecError("duration must be >= 1 s")
    spec.validate()
    schema = spec.schema()
    truth = _run(spec, duration_s, _forced or {})
    values = truth + _noise(spec, duration_s, schema)
    # flow meters and levels never read negative
    sensors = [i for i, t in enumerate(schema.tags) if t.kind == SENSOR and not t.name.startswith("AIT")]
    values[:, sensors] = np.maximum(values[:, sensors], 0.0)
    start = np.datetime64(spec.start, "s")
    timestamps = start + np.arange(duration_s).astype("timedelta64[s]")
    return TagSeries(schema, timestamps, values, np.zeros(duration_s, dtype=bool))


def inject(series: TagSeries, script: AttackScript, spec: PlantSpec | None = None) -> TagSeries:
    """Apply an attack script to a simulated series.

    Sensor attacks rewrite the recorded column only. Actuator attacks need
    the plant ``spec``: the trace is re-simulated with the actuator held in
    the forced state so the physics responds.
    """
    script.validate(series.schema, len(series))
    values = series.values.copy()
    actuator = [a for a in script.attacks if a.kind in ACTUATOR_KINDS]
    if actuator:
        if spec is None:
            raise SpecError("actuator attacks need the plant spec to re-simulate")
        forced: dict[str, np.ndarray] = {}
        for a in actuator:
            arr = forced.setdefault(a.target, np.full(len(series), np.nan))
            arr[a.start:a.end + 1] = OPEN if a.kind == "actuator-force-open" else CLOSED
        values = simulate(spec, len(series), forced).values
    labels = np.zeros(len(series), dtype=bool)
    for a in script.attacks:
        labels[a.start:a.end + 1] = True
        if a.kind in ACTUATOR_KINDS:
            continue
        col = series.schema.index(a.target)
        span = slice(a.start, a.end + 1)
        if a.kind == "sensor-freeze":
            values[span, col] = values[a.start, col]
        elif a.kind == "sensor-offset":
            values[span, col] += a.magnitude
        else:
            values[span, col] = a.magnitude
    return TagSeries(series.schema, series.timestamps, values, labels)


def attack_labels(script: AttackScript, series: TagSeries, schema: TagSchema | None = None):
    """Ground-truth labels for the evaluator, numbered from 1 in start order."""
    from .evaluation import AttackLabel

    schema = schema or series.schema
    out = []
    for i, a in enumerate(sorted(script.attacks, key=lambda a: a.start), 1):
        start = series.timestamps[a.start].astype(object)
        end = series.timestamps[a.end].astype(object)
        out.append(AttackLabel(i, start, end, [a.target], True))
    return out
