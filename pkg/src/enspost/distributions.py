"""Predictive distributions for temperature: normal, normal mixture, raw ensemble.

Every family exposes ``cdf``, ``quantile``, ``mean``, ``median``, ``crps``
and ``central_interval``. The array helpers (``crps_normal``,
``crps_mixture``, ``mixture_cdf``, ``mixture_quantile``, ``crps_ensemble``)
evaluate many forecasts at once and are what the fitters and the experiment
driver call.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.special import erfc, erfcinv

SQRT2 = np.sqrt(2.0)
SQRT_PI = np.sqrt(np.pi)
INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

# bisection for mixture quantiles
BRACKET_SIGMAS = 10.0
QUANTILE_TOL = 1e-9


class DomainError(ValueError):
    pass


def std_normal_cdf(z):
    return 0.5 * erfc(-np.asarray(z, dtype=float) / SQRT2)


def std_normal_pdf(z):
    z = np.asarray(z, dtype=float)
    return INV_SQRT_2PI * np.exp(-0.5 * z * z)


def std_normal_ppf(p):
    return -SQRT2 * erfcinv(2.0 * np.asarray(p, dtype=float))


def _check_probability(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if np.any(~(p > 0) | ~(p < 1)):
        raise DomainError(f"probability must lie in (0, 1), got {p}")
    return p


# -- vectorised kernels ------------------------------------------------------

def crps_normal(mu, sigma, x):
    """Closed-form CRPS of N(mu, sigma^2) at x, elementwise."""
    mu, sigma, x = (np.asarray(a, dtype=float) for a in (mu, sigma, x))
    z = (x - mu) / sigma
    return sigma * (z * (2.0 * std_normal_cdf(z) - 1.0) + 2.0 * std_normal_pdf(z) - 1.0 / SQRT_PI)


def _abs_moment(m, s):
    """E|Y| for Y ~ N(m, s^2)."""
    return m * (2.0 * std_normal_cdf(m / s) - 1.0) + 2.0 * s * std_normal_pdf(m / s)


def crps_mixture(weights, means, sigma, x):
    """Closed-form CRPS of a common-scale Gaussian mixture.

    Parameters
    ----------
    weights : array, shape (..., K)
    means : array, shape (..., K)
    sigma : array broadcastable to shape (...)
    x : array broadcastable to shape (...)
    """
    weights = np.asarray(weights, dtype=float)
    means = np.asarray(means, dtype=float)
    sigma = np.asarray(sigma, dtype=float)[..., None]
    x = np.asarray(x, dtype=float)[..., None]
    first = np.sum(weights * _abs_moment(x - means, sigma), axis=-1)
    diff = means[..., :, None] - means[..., None, :]
    ww = weights[..., :, None] * weights[..., None, :]
    second = np.sum(ww * _abs_moment(diff, SQRT2 * sigma[..., None]), axis=(-2, -1))
    return first - 0.5 * second


def mixture_cdf(weights, means, sigma, x):
    weights = np.asarray(weights, dtype=float)
    z = (np.asarray(x, dtype=float)[..., None] - np.asarray(means, dtype=float)) / np.asarray(sigma, dtype=float)[..., None]
    return np.sum(weights * std_normal_cdf(z), axis=-1)


def mixture_pdf(weights, means, sigma, x):
    sigma = np.asarray(sigma, dtype=float)[..., None]
    z = (np.asarray(x, dtype=float)[..., None] - np.asarray(means, dtype=float)) / sigma
    return np.sum(np.asarray(weights, dtype=float) * std_normal_pdf(z) / sigma, axis=-1)


def mixture_quantile(weights, means, sigma, p):
    """Quantile of common-scale Gaussian mixtures by vectorised bisection.

    The bracket is [min mean - 10 sigma, max mean + 10 sigma]; iteration stops
    once every CDF value is within 1e-9 of ``p`` or the bracket collapses to
    floating-point resolution.
    """
    p = _check_probability(p)
    means = np.asarray(means, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    weights = np.asarray(weights, dtype=float)
    shape = np.broadcast_shapes(means.shape[:-1], sigma.shape, p.shape)
    lo = np.broadcast_to(means.min(axis=-1) - BRACKET_SIGMAS * sigma, shape).copy()
    hi = np.broadcast_to(means.max(axis=-1) + BRACKET_SIGMAS * sigma, shape).copy()
    p = np.broadcast_to(p, shape)
    mid = 0.5 * (lo + hi)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        f = mixture_cdf(weights, means, sigma, mid)
        if np.all(np.abs(f - p) < 0.1 * QUANTILE_TOL) or np.all((mid == lo) | (mid == hi)):
            break
        below = f < p
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return mid


def crps_ensemble(members, x):
    """CRPS of the empirical CDF of ``members`` (last axis) at ``x``.

    Integrates the squared difference between the step CDF and the
    observation's indicator exactly, interval by interval.
    """
    members = np.sort(np.asarray(members, dtype=float), axis=-1)
    x = np.asarray(x, dtype=float)
    m = members.shape[-1]
    x_ = np.broadcast_to(x, members.shape[:-1])[..., None]
    pts = np.sort(np.concatenate([members, x_], axis=-1), axis=-1)
    left = pts[..., :-1]
    width = np.diff(pts, axis=-1)
    # CDF on [left, right): fraction of members <= left
    cdf = (members[..., None, :] <= left[..., :, None]).sum(axis=-1) / m
    step = (left >= x_).astype(float)
    return np.sum(width * (cdf - step) ** 2, axis=-1)


# -- distribution objects ----------------------------------------------------

@dataclass(frozen=True)
class NormalPredictive:
    mu: float
    sigma: float

    def __post_init__(self):
        if not (np.isfinite(self.mu) and np.isfinite(self.sigma) and self.sigma > 0):
            raise DomainError(f"invalid normal predictive N({self.mu}, {self.sigma}^2)")

    def cdf(self, x):
        return std_normal_cdf((np.asarray(x, dtype=float) - self.mu) / self.sigma)

    def pdf(self, x):
        return std_normal_pdf((np.asarray(x, dtype=float) - self.mu) / self.sigma) / self.sigma

    def quantile(self, p):
        return self.mu + self.sigma * std_normal_ppf(_check_probability(p))

    def mean(self) -> float:
        return self.mu

    def median(self) -> float:
        return self.mu

    def crps(self, x):
        return crps_normal(self.mu, self.sigma, x)

    def central_interval(self, coverage: float = 0.8):
        alpha = 1.0 - coverage
        return float(self.quantile(alpha / 2)), float(self.quantile(1 - alpha / 2))


@dataclass(frozen=True)
class MixturePredictive:
    """Equal-scale Gaussian mixture: sum_k w_k N(mu_k, sigma^2)."""

    weights: tuple
    means: tuple
    sigma: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        m = np.asarray(self.means, dtype=float)
        if w.shape != m.shape or w.ndim != 1:
            raise DomainError("weights and means must be 1-d of equal length")
        if (w < 0).any() or abs(w.sum() - 1.0) > 1e-12:
            raise DomainError(f"weights must be non-negative and sum to 1, got sum {w.sum()!r}")
        if not (np.isfinite(m).all() and np.isfinite(self.sigma) and self.sigma > 0):
            raise DomainError("means must be finite and sigma positive")
        object.__setattr__(self, "weights", tuple(w.tolist()))
        object.__setattr__(self, "means", tuple(m.tolist()))

    @property
    def _w(self):
        return np.asarray(self.weights)

    @property
    def _m(self):
        return np.asarray(self.means)

    def cdf(self, x):
        return mixture_cdf(self._w, self._m, self.sigma, x)

    def pdf(self, x):
        return mixture_pdf(self._w, self._m, self.sigma, x)

    def quantile(self, p):
        return mixture_quantile(self._w, self._m, self.sigma, p)

    def mean(self) -> float:
        return float(self._w @ self._m)

    def median(self) -> float:
        return float(self.quantile(0.5))

    def crps(self, x):
        return crps_mixture(self._w, self._m, self.sigma, x)

    def central_interval(self, coverage: float = 0.8):
        alpha = 1.0 - coverage
        return float(self.quantile(alpha / 2)), float(self.quantile(1 - alpha / 2))


@dataclass(frozen=True)
class EnsemblePredictive:
    """The raw ensemble read as an empirical distribution."""

    members: tuple

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(float(v) for v in self.members))

    def cdf(self, x):
        m = np.asarray(self.members)
        return (m <= np.asarray(x, dtype=float)[..., None]).mean(axis=-1)

    def mean(self) -> float:
        return float(np.mean(self.members))

    def median(self) -> float:
        return float(np.median(self.members))

    def crps(self, x):
        return crps_ensemble(self.members, x)

    def central_interval(self, coverage: float = 0.8):
        # the ensemble range; nominal coverage (m - 1) / (m + 1)
        return min(self.members), max(self.members)


Predictive = Union[NormalPredictive, MixturePredictive, EnsemblePredictive]


def normal_crps(d: NormalPredictive, x) -> float:
    return float(crps_normal(d.mu, d.sigma, x))


def mixture_crps(d: MixturePredictive, x) -> float:
    return float(d.crps(x))


def cdf(d: Predictive, x):
    return d.cdf(x)


def quantile(d: Predictive, p):
    if isinstance(d, EnsemblePredictive):
        raise TypeError("quantiles of the raw ensemble are not defined here; use central_interval or median")
    return d.quantile(p)


def pit(d: Predictive, x):
    """Probability integral transform: the predictive CDF at the observation."""
    u = d.cdf(x)
    return float(u) if np.ndim(u) == 0 else np.asarray(u, dtype=float)
