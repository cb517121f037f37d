"""Traffic-flow time series: ingestion, synthesis, windowing, splitting,
partitioning across organizations, and accuracy metrics."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError, EmptyInputError, ParseError, SchemaError

DEFAULT_ORIGIN = datetime(2013, 1, 1)


@dataclass(frozen=True)
class StationSeries:
    station_id: str
    location: tuple[float, float]
    values: np.ndarray

    def __post_init__(self):
        lat, lon = self.location
        if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
            raise SchemaError(f"station {self.station_id}: location {self.location} out of range")


@dataclass(frozen=True)
class TimeSeriesDataset:
    stations: tuple[StationSeries, ...]
    interval_minutes: int = 5
    origin_timestamp: datetime = DEFAULT_ORIGIN

    def __post_init__(self):
        if self.interval_minutes <= 0:
            raise SchemaError("interval_minutes must be positive")
        lengths = {len(s.values) for s in self.stations}
        if len(lengths) > 1:
            longest = max(lengths)
            short = [s.station_id for s in self.stations if len(s.values) != longest]
            raise SchemaError(f"stations differ in length; short stations: {', '.join(short)}")
        for s in self.stations:
            v = s.values
            if not np.all(np.isfinite(v)) or np.any(v < 0):
                raise SchemaError(f"station {s.station_id}: flows must be finite and non-negative")

    @property
    def length(self) -> int:
        return len(self.stations[0].values) if self.stations else 0

    @property
    def station_ids(self) -> list[str]:
        return [s.station_id for s in self.stations]

    def fingerprint(self) -> str:
        """SHA-256 over ids, locations, timing and raw values."""
        h = hashlib.sha256()
        h.update(f"{self.interval_minutes}|{self.origin_timestamp.isoformat()}".encode())
        for s in self.stations:
            h.update(f"|{s.station_id}|{s.location[0]!r}|{s.location[1]!r}|".encode())
            h.update(np.ascontiguousarray(s.values, dtype="<f8").tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class Normalizer:
    """Min-max scaling of flow counts onto [0, 1]."""

    min: float
    max: float

    def __post_init__(self):
        if not self.max > self.min:
            raise SchemaError(f"normalizer needs max > min (got {self.min}, {self.max})")

    @classmethod
    def fit(cls, dataset: TimeSeriesDataset) -> "Normalizer":
        allv = np.concatenate([s.values for s in dataset.stations])
        return cls(float(allv.min()), float(allv.max()))

    def transform(self, v):
        return (np.asarray(v, dtype=np.float64) - self.min) / (self.max - self.min)

    def inverse(self, v):
        return np.asarray(v, dtype=np.float64) * (self.max - self.min) + self.min


@dataclass(frozen=True)
class WindowedSample:
    x: np.ndarray
    y: float
    station_id: str
    t_index: int


@dataclass
class WindowSet:
    """Column-oriented block of windowed samples.

    ``x`` has shape (n, r); row i predicts ``y[i]``. Indexing returns a
    :class:`WindowedSample`.
    """

    x: np.ndarray
    y: np.ndarray
    station_ids: np.ndarray
    t_index: np.ndarray

    def __len__(self):
        return len(self.y)

    def __getitem__(self, i) -> WindowedSample:
        return WindowedSample(self.x[i], float(self.y[i]), str(self.station_ids[i]), int(self.t_index[i]))

    def take(self, idx) -> "WindowSet":
        return WindowSet(self.x[idx], self.y[idx], self.station_ids[idx], self.t_index[idx])

    @classmethod
    def concat(cls, parts: Sequence["WindowSet"]) -> "WindowSet":
        parts = list(parts)
        if not parts:
            raise EmptyInputError("no window sets to concatenate")
        return cls(
            np.concatenate([p.x for p in parts]),
            np.concatenate([p.y for p in parts]),
            np.concatenate([p.station_ids for p in parts]),
            np.concatenate([p.t_index for p in parts]),
        )


@dataclass(frozen=True)
class MetricsReport:
    mae: float
    mse: float
    rmse: float
    mape: float | None  # None when every target sits at or below the MAPE floor
    n: int
    mape_excluded: int = 0


# ---------------------------------------------------------------- ingestion


def _parse_timestamp(text: str, line: int) -> datetime:
    t = text.strip()
    if t.endswith("Z"):
        t = t[:-1] + "+00:00"
    try:
        ts = datetime.fromisoformat(t)
    except ValueError:
        raise ParseError(f"bad timestamp {text!r}", line) from None
    if ts.tzinfo is not None:
        ts = ts.astimezone(timezone.utc).replace(tzinfo=None)
    return ts


def load_csv(path, columns: dict | None = None, gap_policy: str = "reject") -> TimeSeriesDataset:
    """Read a ``timestamp,station_id,flow[,lat,lon]`` CSV.

    ``columns`` maps the canonical names onto the file's header names.
    Rows of a station must appear in increasing time order. With
    ``gap_policy="interpolate"`` missing intervals inside a series are
    filled linearly; the default rejects them.
    """
    if gap_policy not in ("reject", "interpolate"):
        raise ConfigError(f"unknown gap policy {gap_policy!r}", "data.gap_policy")
    names = {"timestamp": "timestamp", "station_id": "station_id", "flow": "flow", "lat": "lat", "lon": "lon"}
    names.update(columns or {})
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyInputError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        for req in ("timestamp", "station_id", "flow"):
            if names[req] not in header:
                raise SchemaError(f"{path}: missing column {names[req]!r}")
        col = {k: header.index(v) for k, v in names.items() if v in header}
        has_loc = "lat" in col and "lon" in col

        rows: dict[str, list[tuple[datetime, float]]] = {}
        locs: dict[str, tuple[float, float]] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", lineno)
            ts = _parse_timestamp(row[col["timestamp"]], lineno)
            sid = row[col["station_id"]].strip()
            if not sid:
                raise ParseError("empty station_id", lineno)
            try:
                flow = float(row[col["flow"]])
                loc = (float(row[col["lat"]]), float(row[col["lon"]])) if has_loc else (0.0, 0.0)
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
            if not math.isfinite(flow) or flow < 0:
                raise ParseError(f"flow must be finite and >= 0, got {flow}", lineno)
            series = rows.setdefault(sid, [])
            if series and ts <= series[-1][0]:
                raise SchemaError(f"station {sid}: non-monotone timestamp at line {lineno}")
            series.append((ts, flow))
            locs.setdefault(sid, loc)
    if not rows:
        raise EmptyInputError(f"{path}: no data rows")

    interval = _infer_interval(rows)
    stations = []
    for sid, series in rows.items():
        values = _regularize(sid, series, interval, gap_policy)
        stations.append((sid, series[0][0], values))

    origins = {o for _, o, _ in stations}
    longest = max(len(v) for _, _, v in stations)
    bad = [sid for sid, o, v in stations if len(v) != longest or o != min(origins)]
    if bad:
        raise SchemaError(f"gap report: stations not covering the full span ({longest} intervals): {', '.join(bad)}")
    return TimeSeriesDataset(
        tuple(StationSeries(sid, locs[sid], v) for sid, _, v in stations),
        interval_minutes=int(interval.total_seconds() // 60),
        origin_timestamp=min(origins),
    )


def _infer_interval(rows) -> timedelta:
    diffs = []
    for series in rows.values():
        diffs.extend(b[0] - a[0] for a, b in zip(series, series[1:]))
    if not diffs:
        return timedelta(minutes=5)
    step = min(diffs)
    if step.total_seconds() % 60 or step.total_seconds() <= 0:
        raise SchemaError(f"interval {step} is not a whole number of minutes")
    return step


def _regularize(sid, series, interval, gap_policy) -> np.ndarray:
    times = [t for t, _ in series]
    flows = np.array([f for _, f in series], dtype=np.float64)
    offsets = [(t - times[0]) / interval for t in times]
    if any(o != int(o) for o in offsets):
        raise SchemaError(f"station {sid}: irregular spacing (not a multiple of {interval})")
    idx = np.array([int(o) for o in offsets])
    if len(idx) == idx[-1] + 1:
        return flows
    if gap_policy == "reject":
        missing = idx[-1] + 1 - len(idx)
        raise SchemaError(f"station {sid}: {missing} missing interval(s)")
    full = np.arange(idx[-1] + 1)
    return np.interp(full, idx, flows)


# ---------------------------------------------------------------- synthesis


@dataclass(frozen=True)
class ProfileGroup:
    """Daily flow curve shared by a spatial group of stations.

    ``peaks`` holds (hour of day, amplitude, width in hours) triples of
    Gaussian bumps added to ``base``.
    """

    name: str
    base: float
    peaks: tuple[tuple[float, float, float], ...]
    center: tuple[float, float]
    spread_deg: float = 0.05

    def curve(self, hours: np.ndarray) -> np.ndarray:
        out = np.full_like(hours, self.base, dtype=np.float64)
        for hour, amp, width in self.peaks:
            d = np.abs(hours - hour)
            d = np.minimum(d, 24.0 - d)
            out += amp * np.exp(-0.5 * (d / width) ** 2)
        return out


PROFILE_LIBRARY = (
    ProfileGroup("inbound-commuter", 40.0, ((8.0, 260.0, 1.2), (17.5, 110.0, 1.5)), (37.77, -122.42)),
    ProfileGroup("outbound-commuter", 40.0, ((8.0, 100.0, 1.5), (17.5, 270.0, 1.2)), (34.05, -118.24)),
    ProfileGroup("arterial", 60.0, ((13.0, 160.0, 4.0),), (38.58, -121.49)),
    ProfileGroup("leisure", 30.0, ((11.0, 80.0, 2.0), (21.0, 190.0, 2.0)), (32.72, -117.16)),
)


@dataclass(frozen=True)
class SyntheticProfile:
    groups: tuple[ProfileGroup, ...] = PROFILE_LIBRARY
    scale_jitter: float = 0.15

    @classmethod
    def from_library(cls, n_groups: int) -> "SyntheticProfile":
        if not 1 <= n_groups <= len(PROFILE_LIBRARY):
            raise ConfigError(f"must be in [1, {len(PROFILE_LIBRARY)}]", "synth.groups")
        return cls(PROFILE_LIBRARY[:n_groups])


def generate_synthetic(
    n_stations: int,
    n_days: int,
    profile: SyntheticProfile | None = None,
    noise_std: float = 5.0,
    seed: int = 0,
    interval_minutes: int = 5,
) -> TimeSeriesDataset:
    """Daily-periodic flows plus Gaussian noise, clipped at zero.

    Station ``i`` belongs to profile group ``i % n_groups`` and is placed
    near that group's center, so location and flow shape go together.
    """
    if n_stations < 1:
        raise ConfigError("must be >= 1", "synth.n_stations")
    if n_days < 1:
        raise ConfigError("must be >= 1", "synth.n_days")
    if not noise_std >= 0:
        raise ConfigError("must be >= 0", "synth.noise_std")
    if interval_minutes < 1 or (24 * 60) % interval_minutes:
        raise ConfigError("must divide one day", "synth.interval_minutes")
    profile = profile or SyntheticProfile()
    rng = np.random.default_rng(seed)
    per_day = 24 * 60 // interval_minutes
    hours = np.arange(per_day) * interval_minutes / 60.0
    stations = []
    for i in range(n_stations):
        group = profile.groups[i % len(profile.groups)]
        scale = 1.0 + profile.scale_jitter * rng.uniform(-1.0, 1.0)
        lat = group.center[0] + group.spread_deg * rng.standard_normal()
        lon = group.center[1] + group.spread_deg * rng.standard_normal()
        day = scale * group.curve(hours)
        values = np.tile(day, n_days)
        if noise_std > 0:
            values = values + rng.normal(0.0, noise_std, size=values.shape)
        np.maximum(values, 0.0, out=values)
        stations.append(StationSeries(f"S{i:03d}", (float(lat), float(lon)), values))
    return TimeSeriesDataset(tuple(stations), interval_minutes, DEFAULT_ORIGIN)


def write_csv(dataset: TimeSeriesDataset, path) -> None:
    step = timedelta(minutes=dataset.interval_minutes)
    times = [(dataset.origin_timestamp + i * step).isoformat() for i in range(dataset.length)]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "station_id", "flow", "lat", "lon"])
        for s in dataset.stations:
            lat, lon = repr(s.location[0]), repr(s.location[1])
            for t, v in zip(times, s.values.tolist()):
                w.writerow([t, s.station_id, repr(v), lat, lon])


def write_manifest(dataset: TimeSeriesDataset, path) -> None:
    lines = [
        f"interval_minutes={dataset.interval_minutes}",
        f"length={dataset.length}",
        f"origin={dataset.origin_timestamp.isoformat()}",
        f"n_stations={len(dataset.stations)}",
        f"sha256={dataset.fingerprint()}",
        "# station_id lat lon",
    ]
    lines += [f"{s.station_id} {s.location[0]!r} {s.location[1]!r}" for s in dataset.stations]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- windows


def make_windows(dataset: TimeSeriesDataset, r: int, s: int, normalizer: Normalizer) -> list[WindowSet]:
    """One :class:`WindowSet` per station.

    Sample ``t`` takes inputs at indices ``t-r .. t-1`` and its target at
    ``t+s-1``; each station yields ``length - r - s + 1`` samples.
    """
    if r < 1 or s < 1:
        raise ConfigError("window sizes r and s must be >= 1", "window")
    out = []
    for st in dataset.stations:
        n = len(st.values) - r - s + 1
        if n < 1:
            raise EmptyInputError(f"station {st.station_id}: series of length {len(st.values)} too short for r={r}, s={s}")
        v = normalizer.transform(st.values)
        x = np.lib.stride_tricks.sliding_window_view(v, r)[:n].copy()
        t = np.arange(r, r + n)
        y = v[t + s - 1]
        out.append(WindowSet(x, y, np.full(n, st.station_id, dtype=object), t))
    return out


def split_train_test(dataset: TimeSeriesDataset, train_fraction: float = 2 / 3):
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"must lie in (0, 1), got {train_fraction}", "data.train_fraction")
    cut = math.floor(dataset.length * train_fraction)
    step = timedelta(minutes=dataset.interval_minutes)
    train = TimeSeriesDataset(
        tuple(StationSeries(s.station_id, s.location, s.values[:cut]) for s in dataset.stations),
        dataset.interval_minutes,
        dataset.origin_timestamp,
    )
    test = TimeSeriesDataset(
        tuple(StationSeries(s.station_id, s.location, s.values[cut:]) for s in dataset.stations),
        dataset.interval_minutes,
        dataset.origin_timestamp + cut * step,
    )
    return train, test


def partition_equal(samples: Sequence[WindowSet], n_orgs: int, seed: int = 0, mode: str = "station") -> list[WindowSet]:
    """Split per-station windows across ``n_orgs`` organizations.

    ``station`` mode deals whole stations round-robin (station ``i`` goes
    to organization ``i % n_orgs``); ``sample`` mode shuffles all samples
    with ``seed`` and deals contiguous chunks.
    """
    if n_orgs < 1:
        raise ConfigError("must be >= 1", "fed.n_orgs")
    samples = list(samples)
    if mode == "station":
        if n_orgs > len(samples):
            raise ConfigError(f"{n_orgs} organizations but only {len(samples)} stations", "fed.n_orgs")
        return [WindowSet.concat(samples[o::n_orgs]) for o in range(n_orgs)]
    if mode == "sample":
        pooled = WindowSet.concat(samples)
        if n_orgs > len(pooled):
            raise ConfigError(f"{n_orgs} organizations but only {len(pooled)} samples", "fed.n_orgs")
        perm = np.random.default_rng(seed).permutation(len(pooled))
        return [pooled.take(np.sort(chunk)) for chunk in np.array_split(perm, n_orgs)]
    raise ConfigError(f"unknown partition mode {mode!r}", "fed.partition")


# ---------------------------------------------------------------- metrics


def metrics(y, yhat, mape_floor: float = 1.0) -> MetricsReport:
    """MAE, MSE, RMSE and MAPE (percent) in vehicle counts.

    Targets with ``|y| <= mape_floor`` are left out of MAPE only.
    """
    y = np.asarray(y, dtype=np.float64).ravel()
    yhat = np.asarray(yhat, dtype=np.float64).ravel()
    if len(y) != len(yhat):
        raise ValueError(f"length mismatch: {len(y)} targets vs {len(yhat)} predictions")
    if len(y) == 0:
        raise EmptyInputError("metrics need at least one sample")
    err = yhat - y
    mae = float(np.mean(np.abs(err)))
    mse = float(np.mean(err * err))
    keep = np.abs(y) > mape_floor
    mape = float(100.0 * np.mean(np.abs(err[keep]) / np.abs(y[keep]))) if keep.any() else None
    return MetricsReport(mae, mse, math.sqrt(mse), mape, len(y), int((~keep).sum()))
