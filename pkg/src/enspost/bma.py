"""Normal BMA with a common component spread.

Member-wise bias regressions give the component means; the EM algorithm for
mixtures then estimates the weights and the common standard deviation by
maximum likelihood.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .dataset import N_MEMBERS, ForecastCase, TrainingWindow
from .distributions import MixturePredictive
from .emos import CASES_PER_PARAM, TooFewCasesError

log = logging.getLogger(__name__)

BIAS_MODES = ("full", "additive", "none")
N_PARAMS = 3 * N_MEMBERS  # 9 intercepts, 9 slopes, 8 free weights and sigma
MIN_CASES = CASES_PER_PARAM * N_PARAMS  # 270
WEIGHT_FLOOR = 1e-8
EM_TOL = 1e-6
EM_MAX_ITER = 500
LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


class DegenerateRegressorError(ValueError):
    pass


class EmConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class BmaParams:
    beta0: tuple
    beta1: tuple
    weights: tuple
    sigma: float
    bias_mode: str = "full"

    def __post_init__(self):
        for name in ("beta0", "beta1", "weights"):
            vals = tuple(float(v) for v in getattr(self, name))
            if len(vals) != N_MEMBERS:
                raise ValueError(f"{name} must have {N_MEMBERS} entries")
            object.__setattr__(self, name, vals)
        w = np.asarray(self.weights)
        if (w < 0).any() or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be non-negative and sum to 1")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.bias_mode not in BIAS_MODES:
            raise ValueError(f"bias_mode must be one of {BIAS_MODES}")
        if self.bias_mode in ("additive", "none") and any(b != 1.0 for b in self.beta1):
            raise ValueError(f"{self.bias_mode} bias mode requires unit slopes")
        if self.bias_mode == "none" and any(b != 0.0 for b in self.beta0):
            raise ValueError("no bias correction requires zero intercepts")

    def component_means(self, members) -> np.ndarray:
        return np.asarray(self.beta0) + np.asarray(self.beta1) * np.asarray(members, dtype=float)


def predict_bma(p: BmaParams, case: ForecastCase) -> MixturePredictive:
    return MixturePredictive(p.weights, tuple(p.component_means(case.members)), p.sigma)


def fit_bias(window: TrainingWindow, mode: str = "full") -> tuple:
    """Per-member bias coefficients (beta0, beta1), each an array of length 9.

    ``full`` regresses the observation on each member by least squares,
    ``additive`` keeps unit slopes and uses the mean error as intercept,
    ``none`` returns (0, 1).
    """
    if mode not in BIAS_MODES:
        raise ValueError(f"bias_mode must be one of {BIAS_MODES}, got {mode!r}")
    f = np.asarray(window.members, dtype=float)
    y = np.asarray(window.obs, dtype=float)
    if mode == "none":
        return np.zeros(N_MEMBERS), np.ones(N_MEMBERS)
    if len(y) < 1:
        raise TooFewCasesError("bias correction needs training cases")
    if mode == "additive":
        return (y[:, None] - f).mean(axis=0), np.ones(N_MEMBERS)

    if len(y) < 2:
        raise TooFewCasesError("least-squares bias correction needs at least 2 cases")
    fc = f - f.mean(axis=0)
    sxx = np.sum(fc * fc, axis=0)
    scale = np.maximum(np.abs(f).max(axis=0), 1.0)
    flat = sxx <= (1e-12 * scale) ** 2 * len(y)
    if flat.any():
        raise DegenerateRegressorError(f"member {int(np.flatnonzero(flat)[0]) + 1} is constant over the window")
    beta1 = (fc * (y - y.mean())[:, None]).sum(axis=0) / sxx
    beta0 = y.mean() - beta1 * f.mean(axis=0)
    return beta0, beta1


def _log_components(obs, means, weights, sigma):
    z = (obs[:, None] - means) / sigma
    return np.log(weights) - 0.5 * z * z - np.log(sigma) - LOG_SQRT_2PI


def log_likelihood(obs, means, weights, sigma) -> float:
    """Mixture log-likelihood of ``obs`` given (n, K) component means."""
    with np.errstate(divide="ignore"):
        return float(logsumexp(_log_components(obs, means, weights, sigma), axis=1).sum())


def apply_weight_floor(weights: np.ndarray, floor: float = WEIGHT_FLOOR) -> np.ndarray:
    """Lift weights below ``floor`` to it, shrinking the rest to keep the total at 1."""
    w = np.asarray(weights, dtype=float).copy()
    low = w < floor
    if low.any():
        w[low] = floor
        w[~low] *= (1.0 - floor * low.sum()) / w[~low].sum()
    return w


def em_step(obs, means, weights, sigma):
    """One EM iteration for fixed component means.

    Returns (weights, sigma, responsibilities) where the responsibilities are
    those of the E-step at the input parameters.
    """
    obs = np.asarray(obs, dtype=float)
    logc = _log_components(obs, means, weights, sigma)
    resp = np.exp(logc - logsumexp(logc, axis=1, keepdims=True))
    new_weights = resp.mean(axis=0)
    new_sigma = np.sqrt(np.sum(resp * (obs[:, None] - means) ** 2) / len(obs))
    return new_weights, new_sigma, resp


@dataclass
class EmResult:
    weights: np.ndarray
    sigma: float
    loglik: list = field(default_factory=list)
    n_iter: int = 0
    converged: bool = False


def fit_em(
    window: TrainingWindow,
    beta0,
    beta1,
    *,
    tol: float = EM_TOL,
    max_iter: int = EM_MAX_ITER,
    weight_floor: float = WEIGHT_FLOOR,
    min_cases: int = MIN_CASES,
) -> EmResult:
    """Maximum-likelihood weights and common spread by EM.

    Starts from uniform weights and sigma = sd(obs - ensemble mean). Stops
    when the per-case log-likelihood gains less than ``tol`` or after
    ``max_iter`` iterations (with an :class:`EmConvergenceWarning`).
    ``loglik`` holds the total log-likelihood at the start and after every
    iteration.
    """
    n = len(window)
    if n < min_cases:
        raise TooFewCasesError(f"BMA needs at least {min_cases} training cases, window has {n}")
    obs = np.asarray(window.obs, dtype=float)
    members = np.asarray(window.members, dtype=float)
    means = np.asarray(beta0, dtype=float) + np.asarray(beta1, dtype=float) * members

    weights = np.full(N_MEMBERS, 1.0 / N_MEMBERS)
    sigma = float(np.std(obs - members.mean(axis=1)))
    sigma = max(sigma, 1e-6 * max(float(np.abs(obs).mean()), 1.0))
    trace = [log_likelihood(obs, means, weights, sigma)]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        weights, sigma, _ = em_step(obs, means, weights, sigma)
        weights = apply_weight_floor(weights, weight_floor)
        sigma = max(float(sigma), 1e-12)
        trace.append(log_likelihood(obs, means, weights, sigma))
        if trace[-1] < trace[-2] - 1e-9 * abs(trace[-2]):
            log.warning("EM log-likelihood decreased at iteration %d (%.12g -> %.12g)", it, trace[-2], trace[-1])
        if (trace[-1] - trace[-2]) / n < tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"EM did not converge in {max_iter} iterations", EmConvergenceWarning, stacklevel=2)
    return EmResult(weights=weights, sigma=sigma, loglik=trace, n_iter=it, converged=converged)


def fit_bma(window: TrainingWindow, bias_mode: str = "full", **em_options) -> BmaParams:
    beta0, beta1 = fit_bias(window, bias_mode)
    em = fit_em(window, beta0, beta1, **em_options)
    return BmaParams(tuple(beta0), tuple(beta1), tuple(em.weights), em.sigma, bias_mode)
