"""Ensemble/observation records: loading, validation and rolling windows.

Forecast cases are held column-wise (one numpy array per field) so that the
fitters can work on whole training windows without Python-level loops.
``ForecastCase`` objects are materialised on demand.
"""
from __future__ import annotations

import datetime as dt
import logging
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

N_MEMBERS = 9
HOURS = (0, 3, 6, 9, 12, 15, 18, 21)
MEMBER_COLUMNS = tuple(f"m{k}" for k in range(1, N_MEMBERS + 1))
FORECAST_COLUMNS = ("date", "hour", "station_id", "obs") + MEMBER_COLUMNS
STATION_COLUMNS = ("station_id", "name", "longitude", "latitude", "altitude_m")
MISSING = "NA"

DateLike = Union[dt.date, str, np.datetime64]


class DataError(ValueError):
    """Base class for ingestion and validation failures."""


class FormatError(DataError):
    pass


class DuplicateRecordError(DataError):
    pass


class StationReferenceError(DataError):
    pass


def as_date(value: DateLike) -> dt.date:
    if isinstance(value, dt.datetime):
        return value.date()
    if isinstance(value, dt.date):
        return value
    if isinstance(value, np.datetime64):
        return value.astype("datetime64[D]").astype(dt.date)
    return dt.date.fromisoformat(str(value))


@dataclass(frozen=True)
class Station:
    id: int
    name: str
    longitude: float
    latitude: float
    altitude: float

    def __post_init__(self):
        if not (self.altitude >= 0):
            raise DataError(f"station {self.id}: altitude must be non-negative, got {self.altitude}")
        if not -180 <= self.longitude <= 180:
            raise DataError(f"station {self.id}: longitude {self.longitude} out of range")
        if not -90 <= self.latitude <= 90:
            raise DataError(f"station {self.id}: latitude {self.latitude} out of range")


@dataclass(frozen=True)
class ForecastCase:
    """One (date, hour, station) record: nine member forecasts and the observation (K)."""

    date: dt.date
    hour: int
    station_id: int
    members: tuple
    observation: Optional[float] = None

    def __post_init__(self):
        if self.hour not in HOURS:
            raise DataError(f"hour {self.hour} not in {HOURS}")
        members = tuple(float(m) for m in self.members)
        if len(members) != N_MEMBERS or not all(np.isfinite(members)):
            raise DataError(f"expected {N_MEMBERS} finite member values, got {self.members!r}")
        object.__setattr__(self, "members", members)
        obs = self.observation
        if obs is not None:
            obs = float(obs)
            if not np.isfinite(obs) or obs <= 0:
                raise DataError(f"observation must be finite and positive (K), got {obs}")
            object.__setattr__(self, "observation", obs)

    @property
    def key(self) -> tuple:
        return (self.date, self.hour, self.station_id)

    @property
    def observed(self) -> bool:
        return self.observation is not None


def _members_of(case_or_members) -> np.ndarray:
    if isinstance(case_or_members, ForecastCase):
        return np.asarray(case_or_members.members, dtype=float)
    return np.asarray(case_or_members, dtype=float)


def ensemble_mean(case_or_members) -> Union[float, np.ndarray]:
    """Arithmetic mean of the members (last axis when given an array)."""
    return _members_of(case_or_members).mean(axis=-1)


def ensemble_variance(case_or_members) -> Union[float, np.ndarray]:
    """Sample variance of the members with divisor ``m - 1``."""
    return _members_of(case_or_members).var(axis=-1, ddof=1)


class Dataset:
    """Immutable collection of stations and forecast cases.

    Cases are stored sorted by (date, hour, station_id). ``obs`` holds NaN
    where the observation is missing.
    """

    def __init__(self, stations: Iterable[Station], dates, hours, station_ids, members, obs):
        stations = list(stations)
        ids = [s.id for s in stations]
        if len(set(ids)) != len(ids):
            raise DuplicateRecordError("duplicate station ids")
        self.stations = {s.id: s for s in sorted(stations, key=lambda s: s.id)}

        dates = np.asarray(dates, dtype="datetime64[D]")
        hours = np.asarray(hours, dtype=np.int64)
        station_ids = np.asarray(station_ids, dtype=np.int64)
        members = np.asarray(members, dtype=float).reshape(-1, N_MEMBERS)
        obs = np.asarray(obs, dtype=float)
        n = len(dates)
        if not (len(hours) == len(station_ids) == len(members) == len(obs) == n):
            raise DataError("column lengths differ")

        bad_hours = ~np.isin(hours, HOURS)
        if bad_hours.any():
            raise DataError(f"hour {hours[bad_hours][0]} not in {HOURS}")
        if not np.isfinite(members).all():
            raise DataError("member values must be finite")
        present = ~np.isnan(obs)
        if (~np.isfinite(obs[present])).any() or (obs[present] <= 0).any():
            raise DataError("observations must be finite and positive (K)")
        unknown = ~np.isin(station_ids, ids)
        if unknown.any():
            raise StationReferenceError(f"unknown station_id {station_ids[unknown][0]}")

        order = np.lexsort((station_ids, hours, dates))
        dates, hours, station_ids = dates[order], hours[order], station_ids[order]
        members, obs = members[order], obs[order]
        if n > 1:
            same = (dates[1:] == dates[:-1]) & (hours[1:] == hours[:-1]) & (station_ids[1:] == station_ids[:-1])
            if same.any():
                i = int(np.flatnonzero(same)[0])
                raise DuplicateRecordError(
                    f"duplicate record (date={dates[i]}, hour={hours[i]}, station_id={station_ids[i]})"
                )

        self.dates = dates
        self.hours = hours
        self.station_ids = station_ids
        self.members = members
        self.obs = obs
        for arr in (self.dates, self.hours, self.station_ids, self.members, self.obs):
            arr.flags.writeable = False

    @classmethod
    def from_cases(cls, stations: Iterable[Station], cases: Iterable[ForecastCase]) -> "Dataset":
        cases = list(cases)
        return cls(
            stations,
            dates=[np.datetime64(c.date, "D") for c in cases],
            hours=[c.hour for c in cases],
            station_ids=[c.station_id for c in cases],
            members=np.array([c.members for c in cases], dtype=float).reshape(-1, N_MEMBERS),
            obs=[np.nan if c.observation is None else c.observation for c in cases],
        )

    def __len__(self) -> int:
        return len(self.dates)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.stations == other.stations
            and np.array_equal(self.dates, other.dates)
            and np.array_equal(self.hours, other.hours)
            and np.array_equal(self.station_ids, other.station_ids)
            and np.array_equal(self.members, other.members)
            and np.array_equal(self.obs, other.obs, equal_nan=True)
        )

    def case(self, i: int) -> ForecastCase:
        obs = self.obs[i]
        return ForecastCase(
            date=self.dates[i].astype(dt.date),
            hour=int(self.hours[i]),
            station_id=int(self.station_ids[i]),
            members=tuple(self.members[i]),
            observation=None if np.isnan(obs) else float(obs),
        )

    @cached_property
    def cases(self) -> tuple:
        return tuple(self.case(i) for i in range(len(self)))

    @property
    def first_date(self) -> dt.date:
        return self.dates.min().astype(dt.date)

    @property
    def last_date(self) -> dt.date:
        return self.dates.max().astype(dt.date)

    def unique_dates(self) -> list:
        return [d.astype(dt.date) for d in np.unique(self.dates)]

    def subset(self, mask: np.ndarray) -> "Dataset":
        return Dataset(
            self.stations.values(),
            self.dates[mask],
            self.hours[mask],
            self.station_ids[mask],
            self.members[mask],
            self.obs[mask],
        )


@dataclass(frozen=True)
class TrainingWindow:
    """Observed cases at one forecast hour from the ``length_days`` days before ``target_date``."""

    target_date: dt.date
    hour: int
    length_days: int
    dates: np.ndarray
    station_ids: np.ndarray
    members: np.ndarray
    obs: np.ndarray
    stations: dict = field(default_factory=dict, compare=False, repr=False)

    def __len__(self) -> int:
        return len(self.obs)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TrainingWindow):
            return NotImplemented
        return (
            (self.target_date, self.hour, self.length_days) == (other.target_date, other.hour, other.length_days)
            and all(np.array_equal(getattr(self, n), getattr(other, n))
                    for n in ("dates", "station_ids", "members", "obs"))
        )

    __hash__ = None

    @classmethod
    def from_arrays(cls, members, obs, *, station_ids=None, dates=None, target_date=None, hour=0, length_days=1):
        """Build a window straight from arrays (simulation studies, tests)."""
        members = np.asarray(members, dtype=float).reshape(-1, N_MEMBERS)
        obs = np.asarray(obs, dtype=float)
        n = len(obs)
        if station_ids is None:
            station_ids = np.zeros(n, dtype=np.int64)
        if dates is None:
            dates = np.full(n, np.datetime64("2000-01-01", "D"))
        return cls(
            target_date=as_date(target_date) if target_date is not None else dt.date(2000, 1, 2),
            hour=hour,
            length_days=length_days,
            dates=np.asarray(dates, dtype="datetime64[D]"),
            station_ids=np.asarray(station_ids, dtype=np.int64),
            members=members,
            obs=obs,
        )

    @property
    def cases(self) -> list:
        return [
            ForecastCase(self.dates[i].astype(dt.date), self.hour, int(self.station_ids[i]),
                         tuple(self.members[i]), float(self.obs[i]))
            for i in range(len(self))
        ]

    def restrict(self, station_ids: Iterable[int]) -> "TrainingWindow":
        mask = np.isin(self.station_ids, list(station_ids))
        return TrainingWindow(
            self.target_date, self.hour, self.length_days,
            self.dates[mask], self.station_ids[mask], self.members[mask], self.obs[mask], self.stations,
        )

    def station_counts(self) -> dict:
        ids, counts = np.unique(self.station_ids, return_counts=True)
        return dict(zip(ids.tolist(), counts.tolist()))


def select_window(
    ds: Dataset,
    target_date: DateLike,
    hour: int,
    n: int,
    station_filter: Optional[Iterable[int]] = None,
) -> TrainingWindow:
    """Observed cases at ``hour`` dated in [target_date - n, target_date - 1].

    The result is sorted by (date, station_id) regardless of how the dataset
    was built, and may be empty.
    """
    if n < 1:
        raise ValueError(f"training length must be at least 1 day, got {n}")
    target = np.datetime64(as_date(target_date), "D")
    mask = (
        (ds.hours == hour)
        & (ds.dates >= target - np.timedelta64(n, "D"))
        & (ds.dates < target)
        & ~np.isnan(ds.obs)
    )
    if station_filter is not None:
        mask &= np.isin(ds.station_ids, list(station_filter))
    return TrainingWindow(
        target_date=as_date(target_date),
        hour=hour,
        length_days=n,
        dates=ds.dates[mask],
        station_ids=ds.station_ids[mask],
        members=ds.members[mask],
        obs=ds.obs[mask],
        stations=ds.stations,
    )


# -- CSV ingestion ----------------------------------------------------------

def _check_header(columns: Sequence[str], expected: Sequence[str], path) -> None:
    columns = [c.strip() for c in columns]
    for i, name in enumerate(expected):
        if i >= len(columns):
            raise FormatError(f"{path}: missing column '{name}'")
        if columns[i] != name:
            raise FormatError(f"{path}: expected column '{name}' at position {i + 1}, found '{columns[i]}'")
    if len(columns) > len(expected):
        raise FormatError(f"{path}: unexpected column '{columns[len(expected)]}'")


def load_stations(path) -> list:
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    _check_header(frame.columns, STATION_COLUMNS, path)
    stations = []
    for row in frame.itertuples(index=False):
        try:
            stations.append(Station(int(row.station_id), row.name.strip(), float(row.longitude),
                                    float(row.latitude), float(row.altitude_m)))
        except ValueError as exc:
            raise FormatError(f"{path}: bad station row {tuple(row)}: {exc}") from exc
    ids = [s.id for s in stations]
    if len(set(ids)) != len(ids):
        raise DuplicateRecordError(f"{path}: duplicate station_id")
    return stations


def default_stations() -> list:
    """The 19 Santiago de Chile monitoring stations (coordinates and altitude)."""
    ref = resources.files("enspost") / "data" / "stations_santiago.csv"
    with resources.as_file(ref) as path:
        return load_stations(path)


def _parse_floats(text: pd.Series) -> np.ndarray:
    """Exact decimal-to-float parsing (pandas' fast parser can be off by one ulp); NaN where unparsable."""

    def parse(v):
        try:
            return float(v)
        except ValueError:
            return np.nan

    return np.array([parse(v) for v in text], dtype=float)


def load_dataset(forecast_file, station_file=None) -> Dataset:
    """Read a forecast CSV and a station CSV into a validated :class:`Dataset`.

    Rows whose member values do not parse as finite numbers are dropped with
    a warning; an ``obs`` field of ``NA`` (or empty) marks a missing
    observation and the case is kept.
    """
    stations = load_stations(station_file) if station_file is not None else default_stations()
    frame = pd.read_csv(forecast_file, dtype=str, keep_default_na=False)
    _check_header(frame.columns, FORECAST_COLUMNS, forecast_file)
    frame.columns = [c.strip() for c in frame.columns]
    frame = frame.apply(lambda col: col.str.strip())

    try:
        dates = pd.to_datetime(frame["date"], format="%Y-%m-%d").to_numpy().astype("datetime64[D]")
    except ValueError as exc:
        raise FormatError(f"{forecast_file}: column 'date' must hold ISO dates: {exc}") from exc
    hours = pd.to_numeric(frame["hour"], errors="coerce")
    sids = pd.to_numeric(frame["station_id"], errors="coerce")
    for name, col in (("hour", hours), ("station_id", sids)):
        if col.isna().any() or (col != col.round()).any():
            raise FormatError(f"{forecast_file}: column '{name}' must hold integers")

    members = np.column_stack([_parse_floats(frame[c]) for c in MEMBER_COLUMNS]).reshape(len(frame), N_MEMBERS)
    ok = np.isfinite(members).all(axis=1)
    if not ok.all():
        log.warning("%s: dropped %d row(s) with missing or unparsable member values",
                    forecast_file, int((~ok).sum()))

    obs_text = frame["obs"]
    missing = obs_text.isin([MISSING, ""])
    obs = _parse_floats(obs_text.where(~missing, "nan"))
    unparsable = ~missing.to_numpy() & np.isnan(obs)
    if unparsable.any():
        i = int(np.flatnonzero(unparsable)[0])
        raise FormatError(f"{forecast_file}: column 'obs' has unparsable value {obs_text.iloc[i]!r}")

    return Dataset(
        stations,
        dates[ok],
        hours.to_numpy(dtype=np.int64)[ok],
        sids.to_numpy(dtype=np.int64)[ok],
        members[ok],
        obs[ok],
    )


def write_stations(stations: Iterable[Station], path) -> None:
    rows = [(s.id, s.name, repr(s.longitude), repr(s.latitude), repr(s.altitude)) for s in stations]
    pd.DataFrame(rows, columns=STATION_COLUMNS).to_csv(path, index=False)


def write_dataset(ds: Dataset, forecast_file, station_file=None) -> None:
    """Write ``ds`` in the forecast CSV format (and the station CSV if a path is given).

    Values are written with ``repr`` so that reading them back is lossless.
    """
    frame = pd.DataFrame({
        "date": np.datetime_as_string(ds.dates, unit="D"),
        "hour": ds.hours,
        "station_id": ds.station_ids,
        "obs": [MISSING if np.isnan(v) else repr(float(v)) for v in ds.obs],
    })
    for k, name in enumerate(MEMBER_COLUMNS):
        frame[name] = [repr(float(v)) for v in ds.members[:, k]]
    Path(forecast_file).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(forecast_file, index=False)
    if station_file is not None:
        write_stations(ds.stations.values(), station_file)
