"""Synthetic station ensembles with controllable bias and spread deficiency.

Each case has a latent temperature signal (seasonal trend, diurnal cycle,
AR(1) day-to-day anomalies). Given the signal and a case-specific error
scale sigma, the observation is signal + sigma * N(0, 1) and member k is
signal + bias_k + slope * altitude_km + spread_factor * sigma * N(0, 1).
With zero biases and ``spread_factor == 1`` the observation is exchangeable
with the members.
"""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .dataset import HOURS, N_MEMBERS, Dataset, Station, default_stations

LAPSE_RATE = -6.5  # K per km


@dataclass(frozen=True)
class ScenarioSpec:
    n_stations: int = 19
    n_days: int = 120
    hours: tuple = HOURS
    member_biases: tuple = (0.0,) * N_MEMBERS
    spread_factor: float = 1.0
    altitude_bias_slope: float = 0.0  # K per km of station altitude
    seed: int = 0
    start_date: dt.date = dt.date(2017, 10, 1)
    base_temperature: float = 290.0  # K at sea level
    seasonal_trend: float = 0.08  # K per day
    diurnal_amplitude: float = 6.0
    ar_coef: float = 0.7
    ar_sd: float = 2.0
    error_sd: float = 1.5
    spread_variability: float = 0.35  # sd of log error scale; drives the spread-skill link
    missing_rate: float = 0.0
    stations: Optional[tuple] = field(default=None, compare=False)

    def __post_init__(self):
        if not self.spread_factor > 0:
            raise ValueError("spread_factor must be positive")
        if self.n_days < 1 or self.n_stations < 1:
            raise ValueError("need at least one day and one station")
        if len(self.member_biases) != N_MEMBERS:
            raise ValueError(f"member_biases needs {N_MEMBERS} entries")
        if any(h not in HOURS for h in self.hours):
            raise ValueError(f"hours must be drawn from {HOURS}")


_MEMBER_BIASES = (0.3, -0.2, 0.1, -0.4, 0.2, -0.3, -1.6, -1.4, 0.4)

PRESETS = {
    "calibrated": ScenarioSpec(),
    "underdispersed": ScenarioSpec(spread_factor=0.5, member_biases=_MEMBER_BIASES),
    "andes": ScenarioSpec(spread_factor=0.5, member_biases=_MEMBER_BIASES,
                          altitude_bias_slope=-2.0, missing_rate=0.05),
}


def preset(name: str, **overrides) -> ScenarioSpec:
    try:
        spec = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(spec, **overrides)


def scenario_stations(spec: ScenarioSpec) -> list:
    if spec.stations is not None:
        return list(spec.stations)
    fixture = default_stations()
    if spec.n_stations <= len(fixture):
        return fixture[:spec.n_stations]
    rng = np.random.default_rng([spec.seed, 1])
    extra = [
        Station(i, f"synthetic-{i}", -70.5 + rng.uniform(-0.5, 0.5), -33.5 + rng.uniform(-0.3, 0.3),
                float(np.round(rng.uniform(100, 2000))))
        for i in range(len(fixture) + 1, spec.n_stations + 1)
    ]
    return fixture + extra


def generate(spec: ScenarioSpec) -> Dataset:
    """Draw a dataset from ``spec``; identical specs give identical datasets."""
    rng = np.random.default_rng(spec.seed)
    stations = scenario_stations(spec)
    n_d, n_h, n_s = spec.n_days, len(spec.hours), len(stations)
    alt_km = np.array([s.altitude for s in stations]) / 1000.0
    hours = np.asarray(spec.hours)

    # regional AR(1) anomaly per day, plus a smaller station-specific one
    common = np.empty(n_d)
    local = np.empty((n_d, n_s))
    scale = np.sqrt(1 - spec.ar_coef ** 2)
    common[0] = rng.normal(0, spec.ar_sd)
    local[0] = rng.normal(0, 0.3 * spec.ar_sd, n_s)
    for t in range(1, n_d):
        common[t] = spec.ar_coef * common[t - 1] + scale * rng.normal(0, spec.ar_sd)
        local[t] = spec.ar_coef * local[t - 1] + scale * rng.normal(0, 0.3 * spec.ar_sd, n_s)

    day = np.arange(n_d)[:, None, None]
    diurnal = spec.diurnal_amplitude * np.sin(2 * np.pi * (hours - 15) / 24 + np.pi / 2)[None, :, None]
    signal = (
        spec.base_temperature
        + LAPSE_RATE * alt_km[None, None, :]
        + spec.seasonal_trend * day
        + diurnal
        + common[:, None, None]
        + local[:, None, :]
    )
    sigma = spec.error_sd * np.exp(spec.spread_variability * rng.standard_normal((n_d, n_h, n_s)))
    obs = signal + sigma * rng.standard_normal((n_d, n_h, n_s))
    noise = rng.standard_normal((n_d, n_h, n_s, N_MEMBERS))
    members = (
        signal[..., None]
        + np.asarray(spec.member_biases)
        + spec.altitude_bias_slope * alt_km[None, None, :, None]
        + spec.spread_factor * sigma[..., None] * noise
    )
    if spec.missing_rate > 0:
        obs = np.where(rng.random(obs.shape) < spec.missing_rate, np.nan, obs)

    dates = np.datetime64(spec.start_date, "D") + np.arange(n_d)
    grid_d, grid_h, grid_s = np.meshgrid(dates, hours, [s.id for s in stations], indexing="ij")
    return Dataset(
        stations,
        grid_d.ravel(),
        grid_h.ravel(),
        grid_s.ravel(),
        members.reshape(-1, N_MEMBERS),
        obs.ravel(),
    )
