"""Station grouping for semi-local estimation.

Two routes: k-means on 24 climatology/forecast-error quantile features
(recomputed for every training window) and fixed altitude bands.
"""
from __future__ import annotations

import datetime as dt
import logging
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .dataset import Dataset, Station, TrainingWindow

log = logging.getLogger(__name__)

N_QUANTILES = 12
QUANTILE_LEVELS = np.arange(1, N_QUANTILES + 1) / (N_QUANTILES + 1)
KMEANS_RESTARTS = 25
ALTITUDE_BANDS = (400.0, 750.0)


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class StationFeatures:
    station_id: int
    features: np.ndarray  # 12 climatological quantiles, then 12 ensemble-mean error quantiles

    @property
    def climatology(self) -> np.ndarray:
        return self.features[:N_QUANTILES]

    @property
    def error(self) -> np.ndarray:
        return self.features[N_QUANTILES:]


@dataclass(frozen=True)
class ClusterAssignment:
    """A partition of station ids into groups for one training window."""

    target_date: Optional[dt.date]
    hour: Optional[int]
    method: str
    groups: tuple

    def __post_init__(self):
        groups = tuple(tuple(sorted(int(s) for s in g)) for g in self.groups if len(g))
        groups = tuple(sorted(groups))
        seen = [s for g in groups for s in g]
        if len(seen) != len(set(seen)):
            raise ValueError("cluster groups overlap")
        object.__setattr__(self, "groups", groups)

    @property
    def stations(self) -> set:
        return {s for g in self.groups for s in g}

    def group_of(self, station_id: int) -> int:
        for i, g in enumerate(self.groups):
            if station_id in g:
                return i
        raise KeyError(station_id)

    def mapping(self) -> dict:
        return {s: i for i, g in enumerate(self.groups) for s in g}

    def covers(self, station_ids: Iterable[int]) -> bool:
        return set(station_ids) <= self.stations


def regional(station_ids: Iterable[int], target_date=None, hour=None) -> ClusterAssignment:
    return ClusterAssignment(target_date, hour, "regional", (tuple(station_ids),))


def local(station_ids: Iterable[int], target_date=None, hour=None) -> ClusterAssignment:
    return ClusterAssignment(target_date, hour, "local", tuple((s,) for s in station_ids))


def _interp_quantiles(sample) -> np.ndarray:
    return np.quantile(np.asarray(sample, dtype=float), QUANTILE_LEVELS, method="linear")


def build_features(ds: Dataset, station: int, window: TrainingWindow) -> StationFeatures:
    """24-feature vector of ``station`` for ``window``.

    Climatology: observations of the same forecast hour from the start of the
    record up to the day before the target date. Forecast error: observation
    minus ensemble mean over the station's cases in the window. Both blocks
    are quantiles at levels i/13, i = 1..12.
    """
    in_window = window.station_ids == station
    if in_window.sum() < N_QUANTILES:
        raise InsufficientDataError(
            f"station {station}: {int(in_window.sum())} observed cases in window, need {N_QUANTILES}"
        )
    target = np.datetime64(window.target_date, "D")
    clim = (
        (ds.station_ids == station) & (ds.hours == window.hour) & (ds.dates < target) & ~np.isnan(ds.obs)
    )
    if clim.sum() < N_QUANTILES:
        raise InsufficientDataError(
            f"station {station}: {int(clim.sum())} climatological observations, need {N_QUANTILES}"
        )
    errors = window.obs[in_window] - window.members[in_window].mean(axis=1)
    features = np.concatenate([_interp_quantiles(ds.obs[clim]), _interp_quantiles(errors)])
    return StationFeatures(int(station), features)


def _standardize(x: np.ndarray) -> np.ndarray:
    sd = x.std(axis=0)
    sd[sd == 0] = 1.0
    return (x - x.mean(axis=0)) / sd


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centres = [x[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min(((x[:, None, :] - np.asarray(centres)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centres.append(x[idx])
    return np.asarray(centres, dtype=float)


def lloyd(x: np.ndarray, centres: np.ndarray, max_iter: int = 300):
    """Lloyd iterations from ``centres``.

    Returns (labels, centres, objective trace). The trace holds the
    within-cluster sum of squares after every assignment step.
    """
    k = len(centres)
    trace = []
    labels = None
    for _ in range(max_iter):
        d2 = ((x[:, None, :] - centres[None]) ** 2).sum(-1)
        new_labels = d2.argmin(axis=1)
        trace.append(float(d2[np.arange(len(x)), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            members = x[labels == j]
            if len(members):
                centres[j] = members.mean(axis=0)
            else:
                # re-seed an empty cluster at the point farthest from its centre
                far = int(d2[np.arange(len(x)), labels].argmax())
                centres[j] = x[far]
    return labels, centres, trace


@dataclass
class KMeansResult:
    labels: np.ndarray
    centres: np.ndarray
    inertia: float
    traces: list


def kmeans(x: np.ndarray, k: int, seed: int = 0, n_init: int = KMEANS_RESTARTS) -> KMeansResult:
    """k-means++ seeded Lloyd's algorithm, best of ``n_init`` restarts."""
    x = np.asarray(x, dtype=float)
    if len(x) < k:
        raise ValueError(f"need at least k={k} points, got {len(x)}")
    rng = np.random.default_rng(seed)
    best = None
    traces = []
    for _ in range(n_init):
        labels, centres, trace = lloyd(x, _kmeans_pp(x, k, rng))
        traces.append(trace)
        if best is None or trace[-1] < best.inertia:
            best = KMeansResult(labels, centres, trace[-1], traces)
    best.traces = traces
    return best


def kmeans_cluster(
    features: Sequence[StationFeatures],
    k: int,
    seed: int = 0,
    *,
    target_date=None,
    hour=None,
    n_init: int = KMEANS_RESTARTS,
) -> ClusterAssignment:
    """Group stations by k-means on z-scored feature vectors."""
    ids = [f.station_id for f in features]
    x = _standardize(np.array([f.features for f in features], dtype=float))
    result = kmeans(x, k, seed=seed, n_init=n_init)
    groups = [tuple(s for s, lab in zip(ids, result.labels) if lab == j) for j in range(k)]
    singletons = [g[0] for g in groups if len(g) == 1]
    if singletons and len(ids) > k:
        log.info("k-means (k=%d) produced singleton cluster(s) for station(s) %s", k, singletons)
    return ClusterAssignment(target_date, hour, f"kmeans({k})", tuple(groups))


def feature_centroids(assignment: ClusterAssignment, features: Sequence[StationFeatures]) -> dict:
    """Group index -> mean standardized feature vector (for merging small groups)."""
    ids = [f.station_id for f in features]
    x = _standardize(np.array([f.features for f in features], dtype=float))
    row = {s: i for i, s in enumerate(ids)}
    return {
        i: x[[row[s] for s in g if s in row]].mean(axis=0)
        for i, g in enumerate(assignment.groups)
        if any(s in row for s in g)
    }


def altitude_band(altitude: float) -> int:
    """1 below 400 m, 2 for 400-750 m inclusive, 3 above 750 m."""
    low, high = ALTITUDE_BANDS
    if altitude < low:
        return 1
    if altitude <= high:
        return 2
    return 3


def expert_altitude_clusters(stations: Iterable[Station], target_date=None, hour=None) -> ClusterAssignment:
    bands = {1: [], 2: [], 3: []}
    for s in stations:
        bands[altitude_band(s.altitude)].append(s.id)
    return ClusterAssignment(target_date, hour, "expert-altitude", tuple(tuple(bands[b]) for b in (1, 2, 3)))


def altitude_centroids(assignment: ClusterAssignment, stations: Mapping[int, Station]) -> dict:
    return {
        i: np.array([np.mean([stations[s].altitude for s in g])])
        for i, g in enumerate(assignment.groups)
    }


def merge_small_groups(
    assignment: ClusterAssignment,
    case_counts: Mapping[int, int],
    min_cases: int,
    centroids: Mapping[int, np.ndarray],
) -> ClusterAssignment:
    """Fold groups with fewer than ``min_cases`` training cases into the nearest group.

    Groups are merged smallest first; distances are between ``centroids``
    (updated as case-weighted means after each merge). Stops when every group
    is large enough or a single group remains.
    """
    groups = [list(g) for g in assignment.groups]
    cents = {i: np.asarray(centroids[i], dtype=float) for i in range(len(groups)) if i in centroids}
    count = lambda g: sum(case_counts.get(s, 0) for s in g)  # noqa: E731
    merged = False
    while len(groups) > 1:
        small = [i for i, g in enumerate(groups) if count(g) < min_cases]
        if not small:
            break
        i = min(small, key=lambda j: (count(groups[j]), groups[j]))
        others = [j for j in range(len(groups)) if j != i]
        if i in cents:
            with_cent = [j for j in others if j in cents]
            if with_cent:
                j = min(with_cent, key=lambda j: (float(np.sum((cents[j] - cents[i]) ** 2)), groups[j]))
            else:
                j = max(others, key=lambda j: count(groups[j]))
        else:
            j = max(others, key=lambda j: count(groups[j]))
        log.warning(
            "%s %s: group %s has %d training cases (< %d); merged into group %s",
            assignment.target_date, assignment.hour, groups[i], count(groups[i]), min_cases, groups[j],
        )
        ni, nj = count(groups[i]), count(groups[j])
        if i in cents and j in cents and ni + nj > 0:
            cents[j] = (ni * cents[i] + nj * cents[j]) / (ni + nj)
        groups[j].extend(groups[i])
        del groups[i]
        cents = {(k if k < i else k - 1): v for k, v in cents.items() if k != i}
        merged = True
    if not merged:
        return assignment
    return ClusterAssignment(assignment.target_date, assignment.hour, assignment.method, tuple(tuple(g) for g in groups))
