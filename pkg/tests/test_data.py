import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedgru.data import (
    Normalizer,
    StationSeries,
    TimeSeriesDataset,
    WindowSet,
    generate_synthetic,
    load_csv,
    make_windows,
    metrics,
    partition_equal,
    split_train_test,
    SyntheticProfile,
    write_csv,
)
from fedgru.errors import ConfigError, EmptyInputError, ParseError, SchemaError


def series_dataset(*columns, interval=5):
    return TimeSeriesDataset(
        tuple(StationSeries(f"S{i}", (0.0, 0.0), np.asarray(c, dtype=float)) for i, c in enumerate(columns)),
        interval,
    )


IDENTITY = Normalizer(0.0, 1.0)


# ---------------------------------------------------------------- csv ingestion


def write(tmp_path, text, name="in.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_load_three_rows(tmp_path):
    p = write(tmp_path, "timestamp,station_id,flow\n"
              "2020-01-01T00:00:00,A,10\n2020-01-01T00:05:00,A,12\n2020-01-01T00:10:00,A,11\n")
    ds = load_csv(p)
    assert ds.station_ids == ["A"]
    assert ds.stations[0].values.tolist() == [10.0, 12.0, 11.0]
    assert ds.interval_minutes == 5


def test_load_non_monotone_is_schema_error(tmp_path):
    p = write(tmp_path, "timestamp,station_id,flow\n"
              "2020-01-01T00:05:00,A,10\n2020-01-01T00:00:00,A,12\n")
    with pytest.raises(SchemaError):
        load_csv(p)


def test_load_short_station_named_in_gap_report(tmp_path):
    rows = ["timestamp,station_id,flow"]
    for sid, n in (("A", 288), ("B", 287)):
        for i in range(n):
            rows.append(f"2020-01-01T{i * 5 // 60:02d}:{i * 5 % 60:02d}:00,{sid},{i}")
    p = write(tmp_path, "\n".join(rows) + "\n")
    with pytest.raises(SchemaError, match="gap report") as err:
        load_csv(p)
    assert "B" in str(err.value).split(":")[-1]
    assert "A" not in str(err.value).split(":")[-1]


def test_load_malformed_row_reports_line(tmp_path):
    p = write(tmp_path, "timestamp,station_id,flow\n2020-01-01T00:00:00,A,10\n2020-01-01T00:05:00,A,abc\n")
    with pytest.raises(ParseError, match="line 3"):
        load_csv(p)


def test_load_empty_file(tmp_path):
    with pytest.raises(EmptyInputError):
        load_csv(write(tmp_path, ""))
    with pytest.raises(EmptyInputError):
        load_csv(write(tmp_path, "timestamp,station_id,flow\n", "h.csv"))


def test_load_gap_reject_and_interpolate(tmp_path):
    p = write(tmp_path, "timestamp,station_id,flow\n"
              "2020-01-01T00:00:00,A,10\n2020-01-01T00:05:00,A,12\n2020-01-01T00:15:00,A,16\n")
    with pytest.raises(SchemaError, match="missing"):
        load_csv(p)
    assert load_csv(p, gap_policy="interpolate").stations[0].values.tolist() == [10.0, 12.0, 14.0, 16.0]


def test_load_irregular_spacing(tmp_path):
    p = write(tmp_path, "timestamp,station_id,flow\n"
              "2020-01-01T00:00:00,A,1\n2020-01-01T00:05:00,A,1\n2020-01-01T00:12:00,A,1\n")
    with pytest.raises(SchemaError):
        load_csv(p)


def test_load_column_mapping_and_location(tmp_path):
    p = write(tmp_path, "time,id,vol,lat,lon\n2020-01-01T00:00:00Z,X,3,37.5,-122.1\n2020-01-01T00:05:00Z,X,4,37.5,-122.1\n")
    ds = load_csv(p, columns={"timestamp": "time", "station_id": "id", "flow": "vol"})
    assert ds.stations[0].location == (37.5, -122.1)
    assert ds.stations[0].values.tolist() == [3.0, 4.0]


def test_csv_round_trip(tmp_path):
    ds = generate_synthetic(3, 1, seed=4)
    write_csv(ds, tmp_path / "d.csv")
    back = load_csv(tmp_path / "d.csv")
    assert back.fingerprint() == ds.fingerprint()


def test_dataset_invariants():
    with pytest.raises(SchemaError):
        series_dataset([1, 2, 3], [1, 2])
    with pytest.raises(SchemaError):
        series_dataset([1, -2, 3])
    with pytest.raises(SchemaError):
        series_dataset([1, np.nan])
    with pytest.raises(SchemaError):
        StationSeries("A", (91.0, 0.0), np.zeros(2))


# ---------------------------------------------------------------- synthesis


def test_synthetic_zero_noise_is_daily_periodic():
    ds = generate_synthetic(1, 2, noise_std=0.0, seed=3)
    v = ds.stations[0].values
    assert len(v) == 2 * 288
    assert np.array_equal(v[:288], v[288:])


def test_synthetic_deterministic():
    a, b = generate_synthetic(5, 3, seed=11), generate_synthetic(5, 3, seed=11)
    assert a.fingerprint() == b.fingerprint()
    assert generate_synthetic(5, 3, seed=12).fingerprint() != a.fingerprint()


def test_synthetic_groups_closer_within_than_across():
    ds = generate_synthetic(8, 7, SyntheticProfile.from_library(2), noise_std=8.0, seed=5)
    daily = np.array([s.values.reshape(7, 288).mean(axis=0) for s in ds.stations])
    group = np.arange(8) % 2
    within, across = [], []
    for i in range(8):
        for j in range(i + 1, 8):
            d = float(np.linalg.norm(daily[i] - daily[j]))
            (within if group[i] == group[j] else across).append(d)
    assert max(within) < min(across)


def test_synthetic_rejects_negative_noise():
    with pytest.raises(ConfigError, match="synth.noise_std"):
        generate_synthetic(1, 1, noise_std=-1.0)


# ---------------------------------------------------------------- windows


def test_windows_boundary_count():
    v = np.arange(1, 14, dtype=float)
    (ws,) = make_windows(series_dataset(v), 12, 1, IDENTITY)
    assert len(ws) == 1
    assert ws.x[0].tolist() == v[:12].tolist()
    assert ws.y[0] == 13.0


def test_windows_count_arithmetic():
    (ws,) = make_windows(series_dataset(np.zeros(100)), 12, 1, IDENTITY)
    assert len(ws) == 88


def test_windows_horizon_indexing():
    (ws,) = make_windows(series_dataset(np.arange(21, dtype=float)), 3, 2, IDENTITY)
    assert ws.x[0].tolist() == [0.0, 1.0, 2.0]
    assert ws.y[0] == 4.0
    assert ws[0].t_index == 3


def test_windows_too_short_names_station():
    with pytest.raises(EmptyInputError, match="S0"):
        make_windows(series_dataset(np.zeros(12)), 12, 1, IDENTITY)


@given(st.lists(st.floats(0, 1000), min_size=3, max_size=60), st.integers(1, 5))
def test_windows_targets_reproduce_series_tail(values, r):
    if len(values) <= r:
        return
    (ws,) = make_windows(series_dataset(values), r, 1, IDENTITY)
    assert ws.y.tolist() == [float(v) for v in values[r:]]


# ---------------------------------------------------------------- splitting and partitioning


def test_split_lengths():
    tr, te = split_train_test(series_dataset(np.arange(90.0)), 2 / 3)
    assert (tr.length, te.length) == (60, 30)
    tr, te = split_train_test(series_dataset(np.arange(5.0)), 0.5)
    assert (tr.length, te.length) == (2, 3)
    assert np.concatenate([tr.stations[0].values, te.stations[0].values]).tolist() == list(range(5))
    with pytest.raises(ConfigError):
        split_train_test(series_dataset(np.arange(5.0)), 1.0)


def station_sets(n):
    return make_windows(series_dataset(*[np.arange(10.0) + 100 * i for i in range(n)]), 3, 1, IDENTITY)


def test_partition_one_station_each():
    parts = partition_equal(station_sets(20), 20)
    assert [set(p.station_ids) for p in parts] == [{f"S{i}"} for i in range(20)]


def test_partition_two_orgs():
    parts = partition_equal(station_sets(4), 2)
    a, b = (set(p.station_ids) for p in parts)
    assert a.isdisjoint(b) and a | b == {"S0", "S1", "S2", "S3"}
    assert len(a) == len(b) == 2


def test_partition_sample_mode_sizes():
    ws = make_windows(series_dataset(np.arange(11.0)), 1, 1, IDENTITY)
    parts = partition_equal(ws, 3, seed=0, mode="sample")
    assert sorted(len(p) for p in parts) == [3, 3, 4]


def test_partition_too_many_orgs():
    with pytest.raises(ConfigError, match="fed.n_orgs"):
        partition_equal(station_sets(3), 4)


@settings(max_examples=40)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 3), st.sampled_from(["station", "sample"]))
def test_partition_is_true_partition(n_st, n_orgs, seed, mode):
    sets = station_sets(n_st)
    pooled = WindowSet.concat(sets)
    if (mode == "station" and n_orgs > n_st) or n_orgs > len(pooled):
        return
    parts = partition_equal(sets, n_orgs, seed, mode)
    assert partition_equal(sets, n_orgs, seed, mode)[0].y.tolist() == parts[0].y.tolist()
    keys = [(s, t) for p in parts for s, t in zip(p.station_ids, p.t_index)]
    assert len(keys) == len(set(keys)) == len(pooled)
    unit = [len(set(p.station_ids)) for p in parts] if mode == "station" else [len(p) for p in parts]
    assert max(unit) - min(unit) <= 1


# ---------------------------------------------------------------- normalizer and metrics


@given(st.floats(-1e4, 1e4), st.floats(1e-3, 1e4), st.floats(0, 1))
def test_normalizer_round_trip(lo, width, frac):
    nm = Normalizer(lo, lo + width)
    v = lo + frac * width
    assert abs(float(nm.inverse(nm.transform(v))) - v) <= 1e-12 * max(1.0, abs(v), abs(lo) + width)
    assert nm.transform(lo) == 0.0
    assert abs(float(nm.transform(lo + width)) - 1.0) <= 1e-15


def test_normalizer_requires_range():
    with pytest.raises(SchemaError):
        Normalizer(1.0, 1.0)


def test_metrics_perfect():
    m = metrics([1, 2, 3], [1, 2, 3])
    assert (m.mae, m.mse, m.rmse, m.mape, m.n) == (0.0, 0.0, 0.0, 0.0, 3)


def test_metrics_zero_targets():
    m = metrics([0, 0], [1, 3])
    assert (m.mae, m.mse, m.rmse) == (2.0, 5.0, math.sqrt(5.0))
    assert m.mape is None and m.mape_excluded == 2


def test_metrics_mape_ten_percent():
    assert metrics([100], [110]).mape == 10.0


def test_metrics_errors():
    with pytest.raises(ValueError):
        metrics([1, 2], [1])
    with pytest.raises(EmptyInputError):
        metrics([], [])


@given(st.lists(st.tuples(st.floats(0, 1e4), st.floats(0, 1e4)), min_size=1, max_size=50))
def test_metrics_invariants(pairs):
    y, yhat = zip(*pairs)
    m = metrics(y, yhat)
    assert m.mae <= m.rmse * (1 + 1e-12) + 1e-300
    assert abs(m.rmse ** 2 - m.mse) <= 1e-9 * max(m.mse, 1e-300)
    assert all(math.isfinite(v) for v in (m.mae, m.mse, m.rmse))
