"""Ingestion, daily aggregation, cleaning, windowing, synthesis, and the
CSV round trips."""

import datetime as dt

import numpy as np
import pytest

from fedcast.data import (
    DailySeries,
    IngestError,
    SYNTH_PROFILES,
    aggregate_daily,
    clean_stations,
    ingest_transactions,
    load_daily_matrix,
    load_series_csv,
    make_windows,
    save_series_csv,
    subsample_windows,
    synth_dataset,
)

HEADER = "station_id,transaction_id,date,time,energy_kwh\n"


def write_csv(tmp_path, body: str, name="tx.csv"):
    path = tmp_path / name
    path.write_text(HEADER + body)
    return path


# ---------------------------------------------------------------------------
# transaction ingestion


def test_ingest_parses_good_rows(tmp_path):
    path = write_csv(
        tmp_path,
        "s1,t1,2020-01-01,08:30,1.5\n"
        "s1,t2,2020-01-01,09:15:30,2.25\n"
        "s2,t3,2020-01-02,23:59,0.0\n",
    )
    records, rejects = ingest_transactions(path)
    assert len(records) == 3 and not rejects
    assert records[0].station_id == "s1"
    assert records[1].time == dt.time(9, 15, 30)
    assert records[2].energy_kwh == 0.0


def test_ingest_collects_malformed_rows_with_line_numbers(tmp_path):
    path = write_csv(
        tmp_path,
        "s1,t1,2020-01-01,08:30,1.5\n"
        "s1,t2,not-a-date,08:30,1.0\n"
        "s1,t3,2020-01-03,08:30,-2.0\n"
        "s1,t4,2020-01-04,08:30,nan\n"
        "s1,t5,2020-01-05,25:99,1.0\n"
        "s1,,2020-01-06,08:30,1.0\n"
        + "s1,t7,2020-01-07,08:30,1.0\n" * 44,
    )
    records, rejects = ingest_transactions(path)
    assert len(records) == 45
    assert [r.line for r in rejects] == [3, 4, 5, 6, 7]
    assert "negative" in rejects[1].reason


def test_ingest_aborts_when_too_many_rows_are_bad(tmp_path):
    good = "s1,t1,2020-01-01,08:30,1.0\n" * 8
    bad = "s1,t2,bad,08:30,1.0\n" * 2
    with pytest.raises(IngestError):
        ingest_transactions(write_csv(tmp_path, good + bad))
    # at exactly the threshold the file is still accepted
    records, rejects = ingest_transactions(write_csv(tmp_path, good + bad, "tx2.csv"),
                                           max_reject_fraction=0.2)
    assert len(records) == 8 and len(rejects) == 2


def test_ingest_rejects_missing_header_column(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("station_id,date,time,energy_kwh\ns1,2020-01-01,08:30,1.0\n")
    with pytest.raises(IngestError):
        ingest_transactions(path)


def test_ingest_empty_file(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("")
    assert ingest_transactions(path) == ([], [])


# ---------------------------------------------------------------------------
# daily aggregation


def make_record(sid, day, kwh, tid="t"):
    from fedcast.data import TransactionRecord

    return TransactionRecord(station_id=sid, transaction_id=tid,
                             date=dt.date.fromisoformat(day), time=dt.time(12, 0),
                             energy_kwh=kwh)


def test_aggregation_conserves_energy_and_fills_gaps():
    # dyadic energies make the double sums exact
    records = [
        make_record("b", "2020-01-01", 0.5),
        make_record("b", "2020-01-01", 0.25),
        make_record("b", "2020-01-04", 2.0),
        make_record("a", "2020-02-10", 1.75),
    ]
    series = aggregate_daily(records)
    assert [s.client_id for s in series] == ["a", "b"]  # sorted by id
    b = series[1]
    assert b.start == dt.date(2020, 1, 1) and b.end == dt.date(2020, 1, 4)
    np.testing.assert_array_equal(b.values, [0.75, 0.0, 0.0, 2.0])
    np.testing.assert_array_equal(b.missing, [False, True, True, False])
    total = sum(s.values.sum() for s in series)
    assert total == 0.5 + 0.25 + 2.0 + 1.75
    assert series[0].last_active == dt.date(2020, 2, 10)


def test_aggregation_of_nothing_is_empty():
    assert aggregate_daily([]) == []


# ---------------------------------------------------------------------------
# cleaning


def fleet(last_gap_by_id: dict[str, int], days=30) -> list[DailySeries]:
    """Stations whose final `gap` days are inactive."""
    out = []
    for sid, gap in last_gap_by_id.items():
        missing = np.zeros(days, dtype=bool)
        if gap:
            missing[-gap:] = True
        out.append(DailySeries(client_id=sid, start=dt.date(2021, 1, 1),
                               values=np.where(missing, 0.0, 1.0), missing=missing))
    return out


def test_cleaning_drops_stations_quiet_past_the_slack():
    series = fleet({"fresh": 0, "borderline": 7, "stale": 8})
    kept, report = clean_stations(series, slack_days=7)
    assert sorted(report.kept) == ["borderline", "fresh"]
    assert [d["client_id"] for d in report.dropped] == ["stale"]
    assert report.end_date == dt.date(2021, 1, 30)
    assert {s.client_id for s in kept} == {"borderline", "fresh"}


def test_cleaning_with_zero_slack_keeps_only_stations_active_at_the_end():
    series = fleet({"fresh": 0, "stale": 1})
    kept, _ = clean_stations(series, slack_days=0)
    assert [s.client_id for s in kept] == ["fresh"]


def test_cleaning_respects_explicit_end_date():
    series = fleet({"a": 0})
    kept, report = clean_stations(series, slack_days=3, end_date=dt.date(2021, 3, 1))
    assert not kept and len(report.dropped) == 1
    with pytest.raises(ValueError):
        clean_stations(series, slack_days=-1)


# ---------------------------------------------------------------------------
# windowing


def test_windows_match_brute_force_enumeration():
    values = np.random.default_rng(0).normal(size=40)
    lookback, horizon = 7, 3
    sw = make_windows(values, lookback, horizon, (0.5, 0.25, 0.25))
    w = 40 - lookback - horizon + 1  # 31
    assert sw.counts == (15, 8, 8)  # floor(31*.5), floor(31*.75)-15, rest
    stacked_inputs = np.vstack([sw.train.inputs, sw.val.inputs, sw.test.inputs])
    stacked_targets = np.vstack([sw.train.targets, sw.val.targets, sw.test.targets])
    for i in range(w):
        np.testing.assert_array_equal(stacked_inputs[i], values[i : i + lookback])
        np.testing.assert_array_equal(stacked_targets[i],
                                      values[i + lookback : i + lookback + horizon])


def test_window_split_counts_frozen_case():
    sw = make_windows(np.arange(200.0), 128, 2)
    assert sw.counts == (49, 11, 11)


def test_minimum_length_series_yields_one_window():
    sw = make_windows(np.arange(130.0), 128, 2, (1.0, 0.0, 0.0))
    assert sw.counts == (1, 0, 0)
    with pytest.raises(ValueError):
        make_windows(np.arange(129.0), 128, 2)


def test_targets_never_leak_across_the_split():
    # with arange values, a value IS its time index, so overlap checks
    # reduce to comparisons on the arrays themselves
    values = np.arange(60.0)
    sw = make_windows(values, 10, 2, (0.6, 0.2, 0.2))
    # no training window's input reaches into a later split's target region
    assert sw.train.inputs.max() < sw.val.targets.min()
    assert sw.val.inputs.max() < sw.test.targets.min()
    # target starts are strictly ordered across the split boundaries
    assert sw.train.targets[:, 0].max() < sw.val.targets[:, 0].min()
    assert sw.val.targets[:, 0].max() < sw.test.targets[:, 0].min()


def test_window_validation():
    with pytest.raises(ValueError):
        make_windows(np.ones((3, 3)), 2, 1)
    with pytest.raises(ValueError):
        make_windows(np.arange(30.0), 10, 2, (0.5, 0.2, 0.2))  # sums to 0.9


def test_subsample_windows_is_even_and_deterministic():
    sw = make_windows(np.arange(60.0), 10, 2, (1.0, 0.0, 0.0))
    full = sw.train
    capped = subsample_windows(full, 10)
    again = subsample_windows(full, 10)
    assert len(capped) == 10
    np.testing.assert_array_equal(capped.inputs, again.inputs)
    np.testing.assert_array_equal(capped.inputs[0], full.inputs[0])
    np.testing.assert_array_equal(capped.inputs[-1], full.inputs[-1])
    assert len(subsample_windows(full, 0)) == len(full)  # no cap
    assert len(subsample_windows(full, 1000)) == len(full)


# ---------------------------------------------------------------------------
# synthesis


def test_synth_is_deterministic_and_well_formed():
    a = synth_dataset(num_clients=3, days=50, seed=11)
    b = synth_dataset(num_clients=3, days=50, seed=11)
    for x, y in zip(a, b):
        assert x.client_id == y.client_id
        np.testing.assert_array_equal(x.values, y.values)
    assert [s.client_id for s in a] == ["client000", "client001", "client002"]
    assert all(s.start == dt.date(2017, 1, 1) for s in a)
    assert all(np.all(s.values >= 0.0) for s in a)
    c = synth_dataset(num_clients=3, days=50, seed=12)
    assert not np.array_equal(a[0].values, c[0].values)


def test_synth_noise_free_matches_the_generative_formula():
    days = 28
    series = synth_dataset(num_clients=2, days=days, seed=5,
                           overrides={"noise_sigma": 0.0, "dropout_rate": 0.0})
    spec = SYNTH_PROFILES["nn5-like"]
    t = np.arange(days, dtype=np.float64)
    for c, s in enumerate(series):
        rng = np.random.default_rng(np.random.SeedSequence((5, c)))
        base = rng.uniform(*spec["base_range"])
        amp = rng.uniform(*spec["amp_range"])
        phase = rng.uniform(0.0, 7.0)
        trend = rng.uniform(*spec["trend_range"])
        want = np.maximum(base + amp * np.sin(2 * np.pi * (t + phase) / 7.0)
                          + trend * (t - days / 2.0), 0.0)
        np.testing.assert_array_equal(s.values, want)
        assert not s.missing.any()


def test_synth_dropout_frequency_matches_the_profile():
    series = synth_dataset(num_clients=1, days=4000, seed=0, profile="ev-like")
    frac = series[0].missing.mean()
    assert 0.07 < frac < 0.13
    np.testing.assert_array_equal(series[0].values[series[0].missing], 0.0)


def test_synth_validation():
    with pytest.raises(ValueError):
        synth_dataset(1, 10, 0, profile="weather-like")
    with pytest.raises(ValueError):
        synth_dataset(0, 10, 0)
    with pytest.raises(ValueError):
        synth_dataset(1, 10, 0, overrides={"volatility": 2.0})


# ---------------------------------------------------------------------------
# CSV round trips


def test_series_csv_round_trip_is_exact(tmp_path):
    series = synth_dataset(num_clients=2, days=30, seed=3, profile="ev-like")
    path = tmp_path / "dataset.csv"
    save_series_csv(path, series)
    loaded = load_series_csv(path)
    assert [s.client_id for s in loaded] == [s.client_id for s in series]
    for x, y in zip(loaded, series):
        assert x.start == y.start
        np.testing.assert_array_equal(x.values, y.values)  # repr() round-trip
        np.testing.assert_array_equal(x.missing, y.missing)


def test_series_csv_rejects_gaps(tmp_path):
    path = tmp_path / "gappy.csv"
    path.write_text(
        "client_id,date,value,missing\n"
        "c1,2020-01-01,1.0,0\n"
        "c1,2020-01-03,2.0,0\n"
    )
    with pytest.raises(IngestError):
        load_series_csv(path)


def test_series_csv_rejects_wrong_header(tmp_path):
    path = tmp_path / "other.csv"
    path.write_text("foo,bar\n1,2\n")
    with pytest.raises(IngestError):
        load_series_csv(path)


def test_daily_matrix_wide_format(tmp_path):
    path = tmp_path / "wide.csv"
    path.write_text(
        "date,north,south\n"
        "2019-06-01,1.5,\n"
        "2019-06-02,2.5,3.5\n"
    )
    series = load_daily_matrix(path)
    assert [s.client_id for s in series] == ["north", "south"]
    np.testing.assert_array_equal(series[0].values, [1.5, 2.5])
    np.testing.assert_array_equal(series[1].missing, [True, False])
    assert series[1].values[0] == 0.0


def test_daily_matrix_rejects_non_contiguous_dates(tmp_path):
    path = tmp_path / "wide.csv"
    path.write_text("date,a\n2019-06-01,1\n2019-06-05,2\n")
    with pytest.raises(IngestError):
        load_daily_matrix(path)
