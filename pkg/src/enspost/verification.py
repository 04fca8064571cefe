"""Forecast verification: CRPS, point-forecast errors, coverage, PIT and
rank histograms, and the Diebold-Mariano and subsampled KS tests."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd
from scipy.stats import kstwobign, norm

from .dataset import ForecastCase
from .distributions import (
    EnsemblePredictive,
    Predictive,
    crps_ensemble,
    crps_mixture,
    crps_normal,
    mixture_cdf,
    mixture_quantile,
    std_normal_cdf,
)

log = logging.getLogger(__name__)

ALPHA = 0.2  # central interval (1 - ALPHA) matches the 9-member ensemble's nominal coverage
N_BINS = 10


class MissingObservationError(ValueError):
    pass


def coverage_nominal(m: int) -> float:
    """Nominal coverage of the range of an m-member ensemble."""
    if m < 1:
        raise ValueError("ensemble size must be positive")
    return (m - 1) / (m + 1)


@dataclass(frozen=True)
class ScoredCase:
    key: tuple
    crps: float
    abs_err_median: float
    sq_err_mean: float
    pit: Optional[float]
    covered80: bool
    rank: Optional[int] = None


def _rank(members: np.ndarray, obs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    below = (members < obs[:, None]).sum(axis=1)
    ties = (members == obs[:, None]).sum(axis=1)
    return 1 + below + rng.integers(0, ties + 1)


def score_case(d: Predictive, case: ForecastCase, rng: Optional[np.random.Generator] = None) -> ScoredCase:
    """Score one predictive distribution against the case's observation."""
    if case.observation is None:
        raise MissingObservationError(f"no observation for {case.key}")
    x = case.observation
    lo, hi = d.central_interval(1.0 - ALPHA)
    rank = None
    pit = None
    if isinstance(d, EnsemblePredictive):
        rng = rng if rng is not None else np.random.default_rng(0)
        rank = int(_rank(np.asarray(d.members)[None], np.array([x]), rng)[0])
    else:
        pit = float(d.cdf(x))
    return ScoredCase(
        key=case.key,
        crps=float(d.crps(x)),
        abs_err_median=abs(x - d.median()),
        sq_err_mean=(x - d.mean()) ** 2,
        pit=pit,
        covered80=bool(lo <= x <= hi),
        rank=rank,
    )


# -- vectorised scoring used by the experiment driver -----------------------

def score_normal(mu, sigma, obs) -> pd.DataFrame:
    mu, sigma, obs = (np.asarray(a, dtype=float) for a in (mu, sigma, obs))
    z = norm.ppf(1 - ALPHA / 2)
    lo, hi = mu - z * sigma, mu + z * sigma
    return pd.DataFrame({
        "mean": mu,
        "median": mu,
        "q10": lo,
        "q90": hi,
        "pit": std_normal_cdf((obs - mu) / sigma),
        "crps": crps_normal(mu, sigma, obs),
        "abs_err": np.abs(obs - mu),
        "sq_err": (obs - mu) ** 2,
        "covered": (obs >= lo) & (obs <= hi),
    })


def score_mixture(weights, means, sigma, obs) -> pd.DataFrame:
    means = np.asarray(means, dtype=float)
    obs = np.asarray(obs, dtype=float)
    weights = np.broadcast_to(np.asarray(weights, dtype=float), means.shape)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), obs.shape)
    q = mixture_quantile(weights[:, None, :], means[:, None, :], sigma[:, None],
                         np.array([ALPHA / 2, 0.5, 1 - ALPHA / 2]))
    mean = np.sum(weights * means, axis=1)
    return pd.DataFrame({
        "mean": mean,
        "median": q[:, 1],
        "q10": q[:, 0],
        "q90": q[:, 2],
        "pit": mixture_cdf(weights, means, sigma, obs),
        "crps": crps_mixture(weights, means, sigma, obs),
        "abs_err": np.abs(obs - q[:, 1]),
        "sq_err": (obs - mean) ** 2,
        "covered": (obs >= q[:, 0]) & (obs <= q[:, 2]),
    })


def score_ensemble(members, obs, rng: np.random.Generator) -> pd.DataFrame:
    """Raw-ensemble scores: empirical-CDF CRPS, ensemble median/mean, range coverage, rank."""
    members = np.asarray(members, dtype=float)
    obs = np.asarray(obs, dtype=float)
    med = np.median(members, axis=1)
    mean = members.mean(axis=1)
    lo, hi = members.min(axis=1), members.max(axis=1)
    return pd.DataFrame({
        "mean": mean,
        "median": med,
        "q10": lo,
        "q90": hi,
        "pit": np.nan,
        "crps": crps_ensemble(members, obs),
        "abs_err": np.abs(obs - med),
        "sq_err": (obs - mean) ** 2,
        "covered": (obs >= lo) & (obs <= hi),
        "rank": _rank(members, obs, rng),
    })


# -- histograms ---------------------------------------------------------------

def rank_histogram(members, obs, rng: Optional[np.random.Generator] = None, seed: int = 0) -> np.ndarray:
    """Counts of observation ranks 1..m+1 among the members; ties split at random."""
    members = np.atleast_2d(np.asarray(members, dtype=float))
    obs = np.atleast_1d(np.asarray(obs, dtype=float))
    rng = rng if rng is not None else np.random.default_rng(seed)
    ranks = _rank(members, obs, rng)
    return np.bincount(ranks - 1, minlength=members.shape[1] + 1)


def pit_histogram(pits, n_bins: int = N_BINS) -> np.ndarray:
    pits = np.asarray(pits, dtype=float)
    idx = np.minimum((pits * n_bins).astype(int), n_bins - 1)
    return np.bincount(idx, minlength=n_bins)


def histogram_frame(counts) -> pd.DataFrame:
    counts = np.asarray(counts)
    total = counts.sum()
    return pd.DataFrame({
        "bin": np.arange(1, len(counts) + 1),
        "count": counts,
        "relative_frequency": counts / total if total else np.zeros(len(counts)),
    })


# -- significance tests -------------------------------------------------------

@dataclass(frozen=True)
class DmResult:
    statistic: float
    p_value: float
    no_difference: bool = False

    def __iter__(self):
        return iter((self.statistic, self.p_value))


def dm_test(a, b, horizon_days: int = 1) -> DmResult:
    """Two-sided Diebold-Mariano test on aligned score series.

    The loss differential d = a - b is studentised with the truncated-kernel
    long-run variance using autocovariance lags 0..horizon_days-1. Negative
    statistics favour ``a``. Identical series give statistic 0, p-value 1.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("score series must be 1-d and aligned")
    T = len(a)
    if T < 10:
        raise ValueError(f"DM test needs at least 10 paired values, got {T}")
    d = a - b
    dbar = d.mean()
    dc = d - dbar
    gamma0 = float(dc @ dc) / T
    tiny = 1e-13 * max(np.abs(a).max(), np.abs(b).max(), 1e-300)
    if np.sqrt(gamma0) <= tiny:
        if abs(dbar) <= tiny:
            return DmResult(0.0, 1.0, no_difference=True)
        return DmResult(float(np.copysign(np.inf, dbar)), 0.0)
    var = gamma0
    for lag in range(1, max(horizon_days, 1)):
        var += 2.0 * float(dc[lag:] @ dc[:-lag]) / T
    if var <= 0:
        # truncated kernel can go negative; fall back to the lag-0 variance
        var = gamma0
    stat = float(np.sqrt(T) * dbar / np.sqrt(var))
    return DmResult(stat, float(2.0 * norm.sf(abs(stat))))


def ks_uniform_subsampled(pits, n_samples: int = 1000, sample_size: int = 1000, seed: int = 0) -> float:
    """Mean asymptotic KS p-value of U(0,1) fits over random subsamples of ``pits``.

    Subsamples are drawn without replacement when the population is at least
    ``sample_size``, with replacement otherwise (a warning is logged).
    """
    pits = np.asarray(pits, dtype=float)
    pits = pits[~np.isnan(pits)]
    if pits.size == 0:
        raise ValueError("no PIT values")
    rng = np.random.default_rng(seed)
    replace = pits.size < sample_size
    if replace:
        log.warning("only %d PIT values for subsamples of %d: sampling with replacement", pits.size, sample_size)
    p = np.empty(n_samples)
    grid = np.arange(1, sample_size + 1) / sample_size
    # chunks keep the (chunk, sample_size) working arrays small
    chunk = 100
    for start in range(0, n_samples, chunk):
        m = min(chunk, n_samples - start)
        if replace:
            idx = rng.integers(0, pits.size, size=(m, sample_size))
        else:
            idx = np.stack([rng.choice(pits.size, size=sample_size, replace=False) for _ in range(m)])
        x = np.sort(np.clip(pits[idx], 0.0, 1.0), axis=1)
        d = np.maximum((grid - x).max(axis=1), (x - grid + 1.0 / sample_size).max(axis=1))
        p[start:start + m] = kstwobign.sf(np.sqrt(sample_size) * d)
    return float(p.mean())


# -- reports --------------------------------------------------------------------

@dataclass
class ScoreReport:
    """Per-hour and overall scores; ``table`` is indexed by hour with an ``overall`` row."""

    table: pd.DataFrame

    def overall(self) -> pd.Series:
        return self.table.loc["overall"]


REPORT_COLUMNS = ["crps", "rmse", "mae", "coverage_pct", "n_cases"]


def build_report(scored) -> ScoreReport:
    """Aggregate scored cases into the per-hour/overall table.

    ``scored`` is an iterable of :class:`ScoredCase` or a frame with columns
    hour, crps, abs_err, sq_err, covered. The overall row is the case-weighted
    mean of the hour rows (RMSE is pooled on the squared-error scale).
    """
    if isinstance(scored, pd.DataFrame):
        frame = scored[["hour", "crps", "abs_err", "sq_err", "covered"]]
    else:
        frame = pd.DataFrame(
            [(c.key[1], c.crps, c.abs_err_median, c.sq_err_mean, c.covered80) for c in scored],
            columns=["hour", "crps", "abs_err", "sq_err", "covered"],
        )
    rows = {}
    for hour, g in frame.groupby("hour", sort=True):
        rows[int(hour)] = _summary(g)
    rows["overall"] = _summary(frame)
    table = pd.DataFrame.from_dict(rows, orient="index", columns=REPORT_COLUMNS)
    table.index.name = "hour"
    return ScoreReport(table)


def _summary(g: pd.DataFrame) -> list:
    if len(g) == 0:
        return [np.nan, np.nan, np.nan, np.nan, 0]
    return [
        float(g["crps"].mean()),
        float(np.sqrt(g["sq_err"].mean())),
        float(g["abs_err"].mean()),
        100.0 * float(g["covered"].mean()),
        int(len(g)),
    ]


def daily_series(frame: pd.DataFrame, column: str, hour=None) -> pd.Series:
    """Mean of ``column`` over stations (and hours unless ``hour`` is given) per date."""
    if hour is not None:
        frame = frame[frame["hour"] == hour]
    return frame.groupby("date", sort=True)[column].mean()
