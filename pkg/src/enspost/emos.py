"""Normal EMOS: N(a0 + sum_k a_k f_k, b0 + b1 S^2) fitted by minimum mean CRPS."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import ndtr

from .dataset import N_MEMBERS, ForecastCase, TrainingWindow, ensemble_variance
from .distributions import INV_SQRT_2PI, NormalPredictive, SQRT_PI, crps_normal, std_normal_cdf, std_normal_pdf

log = logging.getLogger(__name__)

N_PARAMS = N_MEMBERS + 2
CASES_PER_PARAM = 10
MIN_CASES = CASES_PER_PARAM * N_PARAMS  # 110
RESTARTS = 3
FTOL = 1e-8
XTOL = 1e-4


class TooFewCasesError(ValueError):
    pass


class OptimizerDivergenceError(RuntimeError):
    pass


class ZeroVarianceError(ValueError):
    pass


@dataclass(frozen=True)
class EmosParams:
    a0: float
    a: tuple
    b0: float
    b1: float

    def __post_init__(self):
        a = tuple(float(v) for v in self.a)
        if len(a) != N_MEMBERS:
            raise ValueError(f"expected {N_MEMBERS} member coefficients, got {len(a)}")
        if min(a) < 0 or self.b0 < 0 or self.b1 < 0:
            raise ValueError("member coefficients and variance parameters must be non-negative")
        object.__setattr__(self, "a", a)

    def location(self, members) -> np.ndarray:
        return self.a0 + np.asarray(members, dtype=float) @ np.asarray(self.a)

    def variance(self, members) -> np.ndarray:
        return self.b0 + self.b1 * ensemble_variance(members)

    def predict_arrays(self, members):
        """Predictive (mu, sigma) arrays for an (n, 9) member matrix."""
        var = self.variance(members)
        if np.any(var <= 0):
            raise ZeroVarianceError("b0 + b1 S^2 is not positive")
        return self.location(members), np.sqrt(var)


def predict_emos(p: EmosParams, case: ForecastCase) -> NormalPredictive:
    mu, sigma = p.predict_arrays(np.asarray(case.members, dtype=float)[None, :])
    return NormalPredictive(float(mu[0]), float(sigma[0]))


class _Objective:
    """Mean CRPS over a window in the squared (non-negativity) parametrisation.

    theta = (c0, u_1..u_9, v0, v1) with a_k = u_k^2, b0 = v0^2, b1 = v1^2 and
    mu = c0 + sum_k a_k (f_k - centre). The centring constant is the window
    mean of all member values; it only conditions the problem.
    """

    def __init__(self, members: np.ndarray, obs: np.ndarray):
        self.centre = float(members.mean())
        self.g = members - self.centre
        self.s2 = ensemble_variance(members)
        self.obs = obs
        self.n = len(obs)

    def to_params(self, theta) -> EmosParams:
        a = theta[1:1 + N_MEMBERS] ** 2
        return EmosParams(
            a0=float(theta[0] - self.centre * a.sum()),
            a=tuple(a),
            b0=float(theta[-2] ** 2),
            b1=float(theta[-1] ** 2),
        )

    def from_params(self, a0, a, b0, b1) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        return np.concatenate([[a0 + self.centre * a.sum()], np.sqrt(a), [np.sqrt(b0), np.sqrt(b1)]])

    def _moments(self, theta):
        u = theta[1:1 + N_MEMBERS]
        mu = theta[0] + self.g @ (u * u)
        var = theta[-2] ** 2 + theta[-1] ** 2 * self.s2
        return mu, var

    def __call__(self, theta) -> float:
        # inlined crps_normal; this is the optimizer's hot loop
        u = theta[1:1 + N_MEMBERS]
        var = theta[-2] * theta[-2] + (theta[-1] * theta[-1]) * self.s2
        if var.min() <= 0:
            return np.inf
        sigma = np.sqrt(var)
        z = (self.obs - theta[0] - self.g @ (u * u)) / sigma
        value = np.dot(sigma, z * (2.0 * ndtr(z) - 1.0) + 2.0 * INV_SQRT_2PI * np.exp(-0.5 * z * z)) / self.n
        value -= sigma.mean() / SQRT_PI
        return float(value) if np.isfinite(value) else np.inf

    def gradient(self, theta) -> np.ndarray:
        mu, var = self._moments(theta)
        sigma = np.sqrt(np.maximum(var, 1e-300))
        z = (self.obs - mu) / sigma
        d_mu = -(2.0 * std_normal_cdf(z) - 1.0)
        d_sigma = 2.0 * std_normal_pdf(z) - 1.0 / SQRT_PI
        n = len(self.obs)
        u = theta[1:1 + N_MEMBERS]
        grad = np.empty_like(theta)
        grad[0] = d_mu.mean()
        grad[1:1 + N_MEMBERS] = 2.0 * u * (self.g.T @ d_mu) / n
        grad[-2] = np.mean(d_sigma * theta[-2] / sigma)
        grad[-1] = np.mean(d_sigma * theta[-1] * self.s2 / sigma)
        return grad


def _simplex(x, steps):
    pts = np.tile(x, (len(x) + 1, 1))
    pts[1:] += np.diag(steps)
    return pts


def initial_params(members: np.ndarray, obs: np.ndarray) -> tuple:
    """Climatological-bias start: a0 = mean(obs) - mean(ensemble mean), a_k = 1/9, b0 = b1 = 1."""
    a0 = float(obs.mean() - members.mean(axis=1).mean())
    return a0, np.full(N_MEMBERS, 1.0 / N_MEMBERS), 1.0, 1.0


def fit_emos(
    window: TrainingWindow,
    *,
    seed: int = 0,
    method: str = "nelder-mead",
    restarts: int = RESTARTS,
    min_cases: int = MIN_CASES,
) -> EmosParams:
    """Minimum-CRPS estimate of the EMOS coefficients over ``window``.

    ``method="nelder-mead"`` runs a simplex search from the climatological
    start, then up to ``restarts`` searches from random perturbations of the
    incumbent (generator seeded with ``seed``), stopping at the first restart
    that does not improve the mean CRPS by more than 1e-8. ``method="lbfgs"``
    uses the analytic gradient instead. Either way the returned parameters
    never score worse than the start.
    """
    n = len(window)
    if n < min_cases:
        raise TooFewCasesError(f"EMOS needs at least {min_cases} training cases, window has {n}")
    members = np.asarray(window.members, dtype=float)
    obs = np.asarray(window.obs, dtype=float)
    f = _Objective(members, obs)
    theta0 = f.from_params(*initial_params(members, obs))
    best_theta, best_value = theta0, f(theta0)

    rng = np.random.default_rng(seed)
    steps = np.concatenate([[0.1 * max(obs.std(), 0.1)], np.full(N_MEMBERS, 0.1), [0.1, 0.1]])
    start = theta0
    for attempt in range(restarts + 1):
        if method == "nelder-mead":
            res = minimize(
                f, start, method="Nelder-Mead",
                options={"fatol": FTOL, "xatol": XTOL, "maxfev": 20000, "maxiter": 20000,
                         "adaptive": True, "initial_simplex": _simplex(start, steps)},
            )
        elif method == "lbfgs":
            res = minimize(f, start, jac=f.gradient, method="L-BFGS-B",
                           options={"ftol": 1e-14, "gtol": 1e-9, "maxiter": 2000})
        else:
            raise ValueError(f"unknown EMOS optimizer {method!r}")
        improved = np.isfinite(res.fun) and res.fun < best_value - FTOL
        if np.isfinite(res.fun) and res.fun < best_value:
            best_theta, best_value = res.x, float(res.fun)
        if attempt > 0 and not improved:
            break
        start = best_theta + 0.5 * steps * rng.standard_normal(len(best_theta))

    if not np.isfinite(best_value):
        raise OptimizerDivergenceError("mean CRPS is non-finite at every restart")
    return f.to_params(best_theta)


def window_crps(p: EmosParams, window: TrainingWindow) -> float:
    mu, sigma = p.predict_arrays(window.members)
    return float(np.mean(crps_normal(mu, sigma, window.obs)))
