import datetime as dt

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from enspost.dataset import (
    HOURS,
    Dataset,
    DataError,
    DuplicateRecordError,
    ForecastCase,
    FormatError,
    StationReferenceError,
    default_stations,
    ensemble_mean,
    ensemble_variance,
    load_dataset,
    select_window,
    write_dataset,
)
from enspost.synthetic import generate, preset

HEADER = "date,hour,station_id,obs,m1,m2,m3,m4,m5,m6,m7,m8,m9\n"
MEMBERS = ",".join(str(280.0 + k) for k in range(9))


def _case(members, obs=285.0):
    return ForecastCase(dt.date(2017, 10, 1), 0, 1, tuple(members), obs)


@pytest.mark.parametrize("members, expected", [
    (range(1, 10), 5.0),
    ([280.0] * 9, 280.0),
    (range(270, 279), 274.0),
])
def test_ensemble_mean(members, expected):
    assert ensemble_mean(_case([float(m) for m in members])) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("members, expected", [
    (range(1, 10), 7.5),
    ([280.0] * 9, 0.0),
    ([0, 0, 0, 0, 0, 0, 0, 0, 9], 9.0),
])
def test_ensemble_variance(members, expected):
    assert ensemble_variance(_case([float(m) for m in members])) == pytest.approx(expected, abs=1e-12)


@given(st.lists(st.floats(200, 320, allow_nan=False), min_size=9, max_size=9))
def test_variance_nonnegative_and_zero_iff_constant(members):
    v = ensemble_variance(np.array(members))
    assert v >= 0
    if len(set(members)) == 1:
        assert v == 0
    else:
        assert v > 0


def test_station_fixture_matches_table():
    stations = default_stations()
    assert [s.id for s in stations] == list(range(1, 20))
    by_id = {s.id: s for s in stations}
    assert by_id[19].altitude == 2750
    assert by_id[12].altitude == 145
    assert by_id[1].altitude == 390
    assert by_id[9].altitude == 798


def test_load_single_row(tmp_path):
    f = tmp_path / "f.csv"
    f.write_text(HEADER + f"2017-10-01,0,3,285.5,{MEMBERS}\n")
    ds = load_dataset(f)
    assert len(ds) == 1
    case = ds.case(0)
    assert case.station_id == 3 and case.observation == 285.5
    assert case.members == tuple(280.0 + k for k in range(9))


def test_missing_observation_kept(tmp_path):
    f = tmp_path / "f.csv"
    f.write_text(HEADER + f"2017-10-01,0,3,NA,{MEMBERS}\n")
    ds = load_dataset(f)
    assert len(ds) == 1
    assert ds.case(0).observation is None
    assert not ds.case(0).observed


def test_duplicate_record(tmp_path):
    f = tmp_path / "f.csv"
    f.write_text(HEADER + f"2017-10-01,0,3,285,{MEMBERS}\n" * 2)
    with pytest.raises(DuplicateRecordError, match="station_id=3"):
        load_dataset(f)


def test_unknown_station(tmp_path):
    f = tmp_path / "f.csv"
    f.write_text(HEADER + f"2017-10-01,0,42,285,{MEMBERS}\n")
    with pytest.raises(StationReferenceError):
        load_dataset(f)


def test_bad_header_names_column(tmp_path):
    f = tmp_path / "f.csv"
    f.write_text(HEADER.replace("obs", "observation") + f"2017-10-01,0,3,285,{MEMBERS}\n")
    with pytest.raises(FormatError, match="'obs'"):
        load_dataset(f)


def test_missing_member_drops_case(tmp_path, caplog):
    f = tmp_path / "f.csv"
    bad = MEMBERS.replace("280.0", "NA", 1)
    f.write_text(HEADER + f"2017-10-01,0,3,285,{bad}\n2017-10-01,0,4,285,{MEMBERS}\n")
    ds = load_dataset(f)
    assert len(ds) == 1 and ds.case(0).station_id == 4
    assert "dropped 1 row" in caplog.text


@pytest.mark.parametrize("obs", ["-3", "abc"])
def test_invalid_observation(tmp_path, obs):
    f = tmp_path / "f.csv"
    f.write_text(HEADER + f"2017-10-01,0,3,{obs},{MEMBERS}\n")
    with pytest.raises(DataError):
        load_dataset(f)


def test_bad_hour_rejected(tmp_path):
    f = tmp_path / "f.csv"
    f.write_text(HEADER + f"2017-10-01,5,3,285,{MEMBERS}\n")
    with pytest.raises(DataError, match="hour"):
        load_dataset(f)


@pytest.fixture(scope="module")
def full_data():
    return generate(preset("calibrated", n_days=30, seed=3))


@pytest.mark.parametrize("n, expected", [(20, 380), (6, 114)])
def test_window_size_all_stations(full_data, n, expected):
    w = select_window(full_data, full_data.first_date + dt.timedelta(days=25), 12, n)
    assert len(w) == expected


def test_window_single_station(full_data):
    w = select_window(full_data, full_data.first_date + dt.timedelta(days=25), 12, 20, station_filter={19})
    assert len(w) == 20
    assert set(w.station_ids) == {19}


def test_window_bounds_and_hour(full_data):
    target = full_data.first_date + dt.timedelta(days=25)
    w = select_window(full_data, target, 9, 7)
    dates = w.dates.astype(dt.date)
    assert min(dates) == target - dt.timedelta(days=7)
    assert max(dates) == target - dt.timedelta(days=1)


def test_window_excludes_missing_observations():
    ds = generate(preset("calibrated", n_days=25, missing_rate=0.2, seed=1))
    w = select_window(ds, ds.first_date + dt.timedelta(days=22), 0, 20)
    assert 0 < len(w) < 380
    assert not np.isnan(w.obs).any()


def test_window_order_independent(full_data):
    rng = np.random.default_rng(0)
    perm = rng.permutation(len(full_data))
    shuffled = Dataset(full_data.stations.values(), full_data.dates[perm], full_data.hours[perm],
                       full_data.station_ids[perm], full_data.members[perm], full_data.obs[perm])
    target = full_data.first_date + dt.timedelta(days=21)
    a = select_window(full_data, target, 3, 10)
    b = select_window(shuffled, target, 3, 10)
    c = select_window(full_data, target, 3, 10)
    assert a == b == c


def test_round_trip(tmp_path):
    ds = generate(preset("andes", n_days=5, seed=4))
    write_dataset(ds, tmp_path / "f.csv", tmp_path / "s.csv")
    again = load_dataset(tmp_path / "f.csv", tmp_path / "s.csv")
    assert again == ds
    assert np.isnan(again.obs).sum() == np.isnan(ds.obs).sum() > 0


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 9), st.sampled_from(HOURS), st.integers(1, 19),
                          st.floats(250, 320), st.booleans()),
                min_size=1, max_size=30, unique_by=lambda r: r[:3]))
def test_round_trip_property(tmp_path_factory, rows):
    cases = [
        ForecastCase(dt.date(2018, 1, 1) + dt.timedelta(days=d), h, s,
                     tuple(v + 0.1 * k for k in range(9)), v + 0.37 if observed else None)
        for d, h, s, v, observed in rows
    ]
    ds = Dataset.from_cases(default_stations(), cases)
    path = tmp_path_factory.mktemp("rt") / "f.csv"
    write_dataset(ds, path)
    assert load_dataset(path) == ds
