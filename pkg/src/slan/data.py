"""Irregular time-series containers, switch schedules, and data transforms.

An instance is a list of (time, sensor, value) observation events plus an
optional static-feature vector and a binary label.  Nothing is ever gridded:
the model consumes a switch schedule, which groups events by timestamp and
records, per step, which sensors fired and how long ago each of them was
last seen.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from typing import Iterator, NamedTuple

import numpy as np

# Timestamps closer than this (in hours) are one switch step.
GROUPING_TOL = 1e-9

META_FILENAME = "meta.json"


class Observation(NamedTuple):
    time: float
    sensor: int
    value: float


@dataclass
class IstsInstance:
    """One irregularly sampled record.

    Events must be sorted by (time, sensor) with at most one observation per
    (time, sensor) pair; times are hours from the start of the record.
    """

    id: str
    events: list[Observation]
    label: int
    statics: np.ndarray | None = None

    def validate(self, sensor_count: int | None = None) -> None:
        if self.label not in (0, 1):
            raise ValueError(f"instance {self.id!r}: label must be 0 or 1, got {self.label!r}")
        if not self.events:
            raise ValueError(f"instance {self.id!r}: has no events")
        prev = None
        for ev in self.events:
            if ev.time < 0:
                raise ValueError(f"instance {self.id!r}: negative time {ev.time}")
            if sensor_count is not None and not 0 <= ev.sensor < sensor_count:
                raise ValueError(
                    f"instance {self.id!r}: sensor {ev.sensor} outside universe "
                    f"of {sensor_count} sensors")
            key = (ev.time, ev.sensor)
            if prev is not None:
                if key < prev:
                    raise ValueError(f"instance {self.id!r}: events not sorted by (time, sensor)")
                if key == prev:
                    raise ValueError(
                        f"instance {self.id!r}: duplicate observation for sensor "
                        f"{ev.sensor} at t={ev.time}")
            prev = key


@dataclass
class Dataset:
    """A list of instances over a fixed sensor universe."""

    instances: list[IstsInstance]
    sensor_count: int
    static_count: int = 0
    sensor_names: list[str] | None = None

    def __len__(self) -> int:
        return len(self.instances)

    def __iter__(self) -> Iterator[IstsInstance]:
        return iter(self.instances)

    def labels(self) -> np.ndarray:
        return np.array([inst.label for inst in self.instances], dtype=np.int64)

    def validate(self) -> None:
        for inst in self.instances:
            inst.validate(self.sensor_count)
            n_static = 0 if inst.statics is None else len(inst.statics)
            if n_static != self.static_count:
                raise ValueError(
                    f"instance {inst.id!r}: {n_static} static features, "
                    f"expected {self.static_count}")


@dataclass
class DatasetMeta:
    """Standardization statistics and class counts, computed on one split."""

    sensor_count: int
    static_count: int
    mean: np.ndarray
    std: np.ndarray
    static_mean: np.ndarray
    static_std: np.ndarray
    class_counts: np.ndarray


@dataclass
class SwitchSchedule:
    """Per-step activation plan for one instance.

    ``steps[j]`` lists (sensor, value, delta) triples sorted by sensor index;
    ``delta`` is hours since that sensor's previous observation and 0.0 at
    its first.  ``last_seen`` maps each observed sensor to the index of the
    step where it last fired.
    """

    timestamps: np.ndarray
    steps: list[list[tuple[int, float, float]]]
    last_seen: dict[int, int]

    def __len__(self) -> int:
        return len(self.steps)

    def to_bytes(self) -> bytes:
        """Canonical serialization, used for exact schedule comparisons."""
        payload = {
            "timestamps": [t.hex() for t in self.timestamps.tolist()],
            "steps": [[(m, float(v).hex(), float(d).hex()) for m, v, d in step]
                      for step in self.steps],
            "last_seen": sorted(self.last_seen.items()),
        }
        return json.dumps(payload, sort_keys=True).encode()


def build_schedule(instance: IstsInstance, sensor_count: int | None = None) -> SwitchSchedule:
    """Group an instance's events into switch steps.

    Timestamps within ``GROUPING_TOL`` hours collapse into one step, keyed by
    the first time seen.  Raises ``ValueError`` for empty, unsorted, or
    duplicated events.
    """
    instance.validate(sensor_count)
    timestamps: list[float] = []
    steps: list[list[tuple[int, float, float]]] = []
    last_time: dict[int, float] = {}
    last_seen: dict[int, int] = {}

    for ev in instance.events:
        if not timestamps or ev.time - timestamps[-1] > GROUPING_TOL:
            timestamps.append(ev.time)
            steps.append([])
        step = steps[-1]
        if any(m == ev.sensor for m, _, _ in step):
            raise ValueError(
                f"instance {instance.id!r}: sensor {ev.sensor} observed twice "
                f"within one step at t={timestamps[-1]}")
        t_step = timestamps[-1]
        prev = last_time.get(ev.sensor)
        delta = 0.0 if prev is None else t_step - prev
        step.append((ev.sensor, ev.value, delta))
        last_time[ev.sensor] = t_step
        last_seen[ev.sensor] = len(steps) - 1

    for step in steps:
        step.sort(key=lambda triple: triple[0])
    return SwitchSchedule(np.array(timestamps), steps, last_seen)


def compute_meta(dataset: Dataset) -> DatasetMeta:
    """Per-sensor and per-static mean/stddev plus class counts.

    Stddev is the population estimate; sensors or statics with fewer than
    two values, or zero spread, get stddev 1.0 so standardization stays a
    pure shift for them.
    """
    per_sensor: list[list[float]] = [[] for _ in range(dataset.sensor_count)]
    for inst in dataset.instances:
        for ev in inst.events:
            per_sensor[ev.sensor].append(ev.value)
    mean = np.zeros(dataset.sensor_count)
    std = np.ones(dataset.sensor_count)
    for m, vals in enumerate(per_sensor):
        if vals:
            arr = np.asarray(vals)
            mean[m] = arr.mean()
            if len(vals) > 1:
                spread = arr.std()
                if spread > 0:
                    std[m] = spread

    d = dataset.static_count
    static_mean = np.zeros(d)
    static_std = np.ones(d)
    if d and dataset.instances:
        stat = np.stack([inst.statics for inst in dataset.instances])
        static_mean = stat.mean(axis=0)
        if len(dataset) > 1:
            spread = stat.std(axis=0)
            static_std = np.where(spread > 0, spread, 1.0)

    counts = np.zeros(2, dtype=np.int64)
    for inst in dataset.instances:
        counts[inst.label] += 1
    return DatasetMeta(dataset.sensor_count, d, mean, std, static_mean, static_std, counts)


def standardize(dataset: Dataset, meta: DatasetMeta) -> Dataset:
    """Shift/scale every value (and static) by the meta split's statistics."""
    if meta.sensor_count != dataset.sensor_count:
        raise ValueError(f"meta covers {meta.sensor_count} sensors, "
                         f"dataset has {dataset.sensor_count}")
    out = []
    for inst in dataset.instances:
        events = [Observation(ev.time, ev.sensor,
                              (ev.value - meta.mean[ev.sensor]) / meta.std[ev.sensor])
                  for ev in inst.events]
        statics = inst.statics
        if statics is not None:
            statics = (statics - meta.static_mean) / meta.static_std
        out.append(IstsInstance(inst.id, events, inst.label, statics))
    return replace(dataset, instances=out)


def _drop_plan(n_events: int, fraction: float) -> tuple[int, bool]:
    n_drop = int(round(fraction * n_events))
    if n_drop >= n_events:
        return n_events - 1, True
    return n_drop, False


def drop_observations(instance: IstsInstance, fraction: float,
                      rng: np.random.Generator) -> IstsInstance:
    """Remove ``round(fraction * n)`` uniformly chosen events, keeping order.

    A fraction that would empty the instance is clamped so one event
    survives; ``drop_dataset`` counts those clamps.
    """
    if not 0.0 <= fraction < 1.0 + 1e-12:
        raise ValueError(f"drop fraction must be in [0, 1], got {fraction}")
    n = len(instance.events)
    n_drop, _ = _drop_plan(n, fraction)
    if n_drop == 0:
        return replace(instance, events=list(instance.events))
    doomed = set(rng.choice(n, size=n_drop, replace=False).tolist())
    events = [ev for k, ev in enumerate(instance.events) if k not in doomed]
    return replace(instance, events=events)


def drop_dataset(dataset: Dataset, fraction: float, seed: int) -> tuple[Dataset, int]:
    """Apply ``drop_observations`` to every instance; returns the new dataset
    and how many instances hit the keep-one clamp."""
    rng = np.random.default_rng(seed)
    forced = 0
    out = []
    for inst in dataset.instances:
        _, clamped = _drop_plan(len(inst.events), fraction)
        forced += int(clamped)
        out.append(drop_observations(inst, fraction, rng))
    return replace(dataset, instances=out), forced


IMPUTE_MODES = ("ffill", "mean", "interpolation")


def impute(instance: IstsInstance, mode: str, meta: DatasetMeta) -> IstsInstance:
    """Densify: give every sensor a value at every grouped timestamp.

    Observed values are kept verbatim.  Missing cells are filled with the
    meta (training) mean, the last observed value, or a linear interpolation
    between the two nearest observations; before a sensor's first
    observation every mode falls back to the meta mean, and after its last
    observation interpolation falls back to the last observed value.
    """
    if mode not in IMPUTE_MODES:
        raise ValueError(f"unknown impute mode {mode!r}; expected one of {IMPUTE_MODES}")
    schedule = build_schedule(instance, meta.sensor_count)
    times = schedule.timestamps
    s = meta.sensor_count

    observed: list[dict[int, float]] = [dict() for _ in range(s)]
    for j, step in enumerate(schedule.steps):
        for m, value, _ in step:
            observed[m][j] = value

    events: list[Observation] = []
    for j, t in enumerate(times):
        for m in range(s):
            if j in observed[m]:
                value = observed[m][j]
            elif mode == "mean":
                value = float(meta.mean[m])
            else:
                prev_j = max((k for k in observed[m] if k < j), default=None)
                if prev_j is None:
                    value = float(meta.mean[m])
                elif mode == "ffill":
                    value = observed[m][prev_j]
                else:
                    next_j = min((k for k in observed[m] if k > j), default=None)
                    if next_j is None:
                        value = observed[m][prev_j]
                    else:
                        t0, t1 = times[prev_j], times[next_j]
                        v0, v1 = observed[m][prev_j], observed[m][next_j]
                        value = v0 + (v1 - v0) * (t - t0) / (t1 - t0)
            events.append(Observation(float(t), m, float(value)))
    return replace(instance, events=events)


def impute_dataset(dataset: Dataset, mode: str, meta: DatasetMeta) -> Dataset:
    if mode == "none":
        return dataset
    return replace(dataset,
                   instances=[impute(inst, mode, meta) for inst in dataset.instances])


def weighted_sampler(labels: np.ndarray, seed: int,
                     block: int = 4096) -> Iterator[int]:
    """Endless stream of instance indices, inverse-class-frequency weighted.

    Each draw lands on either class with probability 1/2 (two-class case)
    and uniformly within the class.  Same seed, same stream.
    """
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=2)
    if counts[0] == 0 or counts[1] == 0:
        raise ValueError(f"weighted sampler needs both classes, got counts {counts.tolist()}")
    weights = 1.0 / counts[labels]
    weights = weights / weights.sum()
    rng = np.random.default_rng(seed)
    n = len(labels)
    while True:
        for idx in rng.choice(n, size=block, replace=True, p=weights):
            yield int(idx)


def split_dataset(dataset: Dataset, seed: int,
                  fractions: tuple[float, float, float] = (0.7, 0.15, 0.15),
                  ) -> tuple[Dataset, Dataset, Dataset]:
    """Seeded shuffle into train/val/test parts."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {fractions}")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    picks = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    return tuple(
        replace(dataset, instances=[dataset.instances[i] for i in part])
        for part in picks)


@dataclass
class SyntheticConfig:
    """Knobs for the synthetic generator.

    Instances live on a regular hourly grid that missingness then thins out;
    ``missing_rate = 0`` therefore yields dense, regularly sampled series.
    The first ``n_informative`` sensors drift apart by class (+drift for the
    positive class, -drift for the negative); ``noise`` scales every
    stochastic term, so ``noise = 0`` makes the classes exactly separable by
    any informative sensor's last value.
    """

    n: int = 2000
    sensor_count: int = 5
    max_steps: int = 50
    missing_rate: float = 0.5
    noise: float = 0.3
    drift: float = 1.0
    informative: bool = True
    n_informative: int | None = None
    static_count: int = 0
    positive_rate: float = 0.5
    step_hours: float = 1.0
    seed: int = 0

    def resolved_informative(self) -> int:
        if self.n_informative is not None:
            return self.n_informative
        return max(1, self.sensor_count // 2)

    def validate(self) -> None:
        if self.n < 2:
            raise ValueError(f"need at least 2 instances, got {self.n}")
        if self.sensor_count < 1:
            raise ValueError(f"need at least 1 sensor, got {self.sensor_count}")
        if self.max_steps < 2:
            raise ValueError(f"need at least 2 grid steps, got {self.max_steps}")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError(f"missing_rate must be in [0, 1), got {self.missing_rate}")
        if not 0.0 < self.positive_rate < 1.0:
            raise ValueError(f"positive_rate must be in (0, 1), got {self.positive_rate}")
        if self.noise < 0 or self.drift < 0 or self.step_hours <= 0:
            raise ValueError("noise/drift must be >= 0 and step_hours > 0")
        if not 1 <= self.resolved_informative() <= self.sensor_count:
            raise ValueError(f"n_informative must be in [1, {self.sensor_count}]")


# Missingness shaping: per-sensor base-rate spread and, when informative,
# how strongly the latent value tilts the observation probability.
_RATE_SPREAD = 0.25
_INFO_SLOPE = 0.5
_MIN_KEEP = 0.02


def generate_synthetic(config: SyntheticConfig) -> Dataset:
    """Draw a labeled synthetic dataset.

    Latent trajectories are a class-dependent linear drift on the informative
    sensors plus noise-scaled baseline, random walk, and measurement terms.
    When ``informative`` is set, the probability of observing a cell shifts
    with the latent value itself, so the missingness pattern carries label
    signal on top of the values.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    s = config.sensor_count
    n_info = config.resolved_informative()
    if s == 1:
        rate_factor = np.ones(1)
    else:
        rate_factor = np.linspace(1.0 - _RATE_SPREAD, 1.0 + _RATE_SPREAD, s)

    instances = []
    for i in range(config.n):
        label = int(rng.uniform() < config.positive_rate)
        length = int(rng.integers(max(2, config.max_steps // 2), config.max_steps + 1))
        t = config.step_hours * np.arange(1, length + 1)
        ramp = (t / t[-1])[:, None]                       # (L, 1) in (0, 1]
        drift = np.zeros(s)
        drift[:n_info] = config.drift * (1.0 if label == 1 else -1.0)
        baseline = rng.normal(0.0, 1.0, s)
        walk = np.cumsum(rng.normal(0.0, 0.3, (length, s)), axis=0)
        meas = rng.normal(0.0, 0.5, (length, s))
        latent = ramp * drift[None, :] + config.noise * (baseline[None, :] + walk)
        values = latent + config.noise * meas

        q = rate_factor[None, :].repeat(length, axis=0)
        if config.informative:
            q = q * (1.0 - _INFO_SLOPE * np.tanh(latent))
        keep_p = np.clip(1.0 - config.missing_rate * q, _MIN_KEEP, 1.0)
        mask = rng.uniform(size=(length, s)) < keep_p
        if not mask.any():
            mask[rng.integers(length), rng.integers(s)] = True

        events = [Observation(float(t[j]), m, float(values[j, m]))
                  for j in range(length) for m in range(s) if mask[j, m]]
        statics = None
        if config.static_count:
            statics = rng.normal(0.0, 1.0, config.static_count) + (2 * label - 1) * 0.25
        instances.append(IstsInstance(f"inst-{i:05d}", events, label, statics))

    names = [f"s{m}" for m in range(s)]
    return Dataset(instances, s, config.static_count, names)


def dataset_stats(dataset: Dataset) -> dict:
    """Row of corpus-level statistics: sizes, density, imbalance."""
    n = len(dataset)
    step_counts = []
    event_counts = []
    for inst in dataset.instances:
        sched = build_schedule(inst)
        step_counts.append(len(sched))
        event_counts.append(len(inst.events))
    steps = np.asarray(step_counts, dtype=np.float64)
    events = np.asarray(event_counts, dtype=np.float64)
    dense_cells = steps * dataset.sensor_count
    counts = np.bincount(dataset.labels(), minlength=2)
    minority = counts.min() / max(1, counts.sum())
    return {
        "instances": n,
        "sensors": dataset.sensor_count,
        "statics": dataset.static_count,
        "avg_observations": float(steps.mean()) if n else 0.0,
        "avg_events": float(events.mean()) if n else 0.0,
        "missing_pct": float(100.0 * (1.0 - events.sum() / dense_cells.sum())) if n else 0.0,
        "imbalance_pct": float(100.0 * minority),
    }


def write_jsonl(dataset: Dataset, path: str | os.PathLike) -> None:
    """Write one instance per line plus a ``meta.json`` sidecar next to it."""
    path = os.fspath(path)
    with open(path, "w", encoding="utf-8") as fh:
        for inst in dataset.instances:
            row = {
                "id": inst.id,
                "label": inst.label,
                "statics": None if inst.statics is None else [float(v) for v in inst.statics],
                "events": [[float(ev.time), int(ev.sensor), float(ev.value)]
                           for ev in inst.events],
            }
            fh.write(json.dumps(row, separators=(",", ":")) + "\n")
    meta_path = os.path.join(os.path.dirname(path) or ".", META_FILENAME)
    names = dataset.sensor_names or [f"s{m}" for m in range(dataset.sensor_count)]
    with open(meta_path, "w", encoding="utf-8") as fh:
        json.dump({"sensor_count": dataset.sensor_count,
                   "static_count": dataset.static_count,
                   "sensor_names": names}, fh, indent=2)
        fh.write("\n")


def read_jsonl(path: str | os.PathLike) -> Dataset:
    """Load a JSONL split, taking the sensor universe from ``meta.json``.

    Malformed lines fail with their line number; structural problems inside
    an instance fail with its id.  An empty file yields an empty dataset.
    """
    path = os.fspath(path)
    meta_path = os.path.join(os.path.dirname(path) or ".", META_FILENAME)
    sensor_count = None
    static_count = None
    sensor_names = None
    if os.path.exists(meta_path):
        with open(meta_path, encoding="utf-8") as fh:
            sidecar = json.load(fh)
        sensor_count = int(sidecar["sensor_count"])
        static_count = int(sidecar.get("static_count", 0))
        sensor_names = sidecar.get("sensor_names")

    instances = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                inst_id = str(row["id"])
                label = row["label"]
                statics = row.get("statics")
                events = [Observation(float(t), int(m), float(v))
                          for t, m, v in row["events"]]
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed instance line ({exc})") from exc
            inst = IstsInstance(
                inst_id, events, label,
                None if statics is None else np.asarray(statics, dtype=np.float64))
            instances.append(inst)

    if sensor_count is None:
        if not instances:
            raise ValueError(f"{path}: empty file and no {META_FILENAME} sidecar; "
                             f"cannot infer the sensor universe")
        sensor_count = 1 + max(ev.sensor for inst in instances for ev in inst.events)
        static_count = 0 if instances[0].statics is None else len(instances[0].statics)
    dataset = Dataset(instances, sensor_count, static_count or 0, sensor_names)
    dataset.validate()
    return dataset


def load_split_dir(data_dir: str | os.PathLike) -> tuple[Dataset, Dataset, Dataset]:
    """Read train/val/test JSONL files from one directory."""
    parts = []
    for name in ("train", "val", "test"):
        fp = os.path.join(os.fspath(data_dir), f"{name}.jsonl")
        if not os.path.exists(fp):
            raise FileNotFoundError(f"missing split file: {fp}")
        parts.append(read_jsonl(fp))
    return tuple(parts)
