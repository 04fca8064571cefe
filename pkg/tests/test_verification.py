import datetime as dt
import logging

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from enspost.dataset import ForecastCase
from enspost.distributions import EnsemblePredictive, MixturePredictive, NormalPredictive
from enspost.verification import (
    build_report,
    coverage_nominal,
    dm_test,
    histogram_frame,
    ks_uniform_subsampled,
    pit_histogram,
    rank_histogram,
    score_case,
    score_ensemble,
    score_mixture,
    score_normal,
)

import oracles


def _case(obs, hour=0, members=(0.0,) * 9, day=0):
    return ForecastCase(dt.date(2018, 1, 1) + dt.timedelta(days=day), hour, 1, tuple(members), obs)


@pytest.mark.parametrize("m, expected", [(9, 0.8), (1, 0.0), (19, 0.9)])
def test_coverage_nominal(m, expected):
    assert coverage_nominal(m) == expected


def test_score_standard_normal_at_zero():
    s = score_case(NormalPredictive(280.0, 1.0), _case(280.0))
    assert s.crps == pytest.approx(0.233695, abs=1e-6)
    assert s.abs_err_median == 0.0 and s.covered80


def test_score_point_like_forecast():
    s = score_case(NormalPredictive(283.0, 1e-10), _case(283.0))
    assert s.crps == pytest.approx(0.0, abs=1e-9)
    assert s.abs_err_median == 0.0 and s.sq_err_mean == 0.0


def test_outside_central_interval():
    d = NormalPredictive(280.0, 1.0)
    assert not score_case(d, _case(float(d.quantile(0.95)))).covered80


def test_ensemble_scores():
    members = tuple(float(v) for v in range(1, 10))
    s = score_case(EnsemblePredictive(members), _case(11.0, members=members))
    assert s.rank == 10 and s.pit is None
    assert s.crps == pytest.approx(oracles.pairwise_ensemble_crps(np.array(members), 11.0), abs=1e-12)
    assert s.abs_err_median == 6.0 and s.sq_err_mean == 36.0
    assert not s.covered80


@pytest.mark.parametrize("obs, rank", [(-5.0, 1), (50.0, 10)])
def test_rank_extremes(obs, rank):
    counts = rank_histogram(np.arange(9.0)[None], [obs])
    assert counts[rank - 1] == 1 and counts.sum() == 1


def test_rank_histogram_exchangeable_is_uniform():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((10_000, 10))
    counts = rank_histogram(x[:, :9], x[:, 9], seed=1)
    assert chisquare(counts).pvalue > 0.01


def test_rank_ties_are_randomised():
    members = np.zeros((4000, 9))
    counts = rank_histogram(members, np.zeros(4000), seed=2)
    assert chisquare(counts).pvalue > 0.01


def test_vectorised_scores_agree_with_scalar_path():
    rng = np.random.default_rng(3)
    n = 40
    members = 280 + rng.normal(0, 2, (n, 9))
    obs = 280 + rng.normal(0, 2, n)
    mu, sigma = members.mean(1), rng.uniform(0.5, 2.0, n)
    w = rng.dirichlet(np.ones(9))
    means = members + 0.5
    normal = score_normal(mu, sigma, obs)
    mixture = score_mixture(w, means, np.full(n, 1.3), obs)
    raw = score_ensemble(members, obs, np.random.default_rng(0))
    for i in range(n):
        case = _case(float(obs[i]), members=members[i])
        s = score_case(NormalPredictive(mu[i], sigma[i]), case)
        assert normal.loc[i, "crps"] == pytest.approx(s.crps, abs=1e-12)
        assert normal.loc[i, "covered"] == s.covered80
        s = score_case(MixturePredictive(tuple(w), tuple(means[i]), 1.3), case)
        assert mixture.loc[i, "crps"] == pytest.approx(s.crps, abs=1e-12)
        assert mixture.loc[i, "abs_err"] == pytest.approx(s.abs_err_median, abs=1e-8)
        assert mixture.loc[i, "pit"] == pytest.approx(s.pit, abs=1e-12)
        s = score_case(EnsemblePredictive(tuple(members[i])), case)
        assert raw.loc[i, "crps"] == pytest.approx(s.crps, abs=1e-12)
        assert raw.loc[i, "covered"] == s.covered80


def test_pit_histogram_bins():
    counts = pit_histogram([0.0, 0.05, 0.1, 0.999, 1.0])
    assert counts.tolist() == [2, 1, 0, 0, 0, 0, 0, 0, 0, 2]
    frame = histogram_frame(counts)
    assert list(frame.columns) == ["bin", "count", "relative_frequency"]
    assert frame["relative_frequency"].sum() == pytest.approx(1.0)


# -- Diebold-Mariano ------------------------------------------------------------

def test_dm_identical_series():
    a = np.random.default_rng(4).uniform(0, 2, 50)
    res = dm_test(a, a)
    assert (res.statistic, res.p_value, res.no_difference) == (0.0, 1.0, True)


@settings(max_examples=50)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_dm_antisymmetric(seed, h):
    rng = np.random.default_rng(seed)
    a, b = rng.gamma(2.0, 1.0, (2, 60))
    assert dm_test(a, b, h).statistic == pytest.approx(-dm_test(b, a, h).statistic, abs=1e-12)


@settings(max_examples=30)
@given(st.integers(0, 10_000), st.floats(0.01, 100), st.floats(-50, 50))
def test_dm_affine_invariance(seed, scale, shift):
    rng = np.random.default_rng(seed)
    a, b = rng.gamma(2.0, 1.0, (2, 60))
    s1 = dm_test(a, b).statistic
    s2 = dm_test(scale * a + shift, scale * b + shift).statistic
    assert s2 == pytest.approx(s1, rel=1e-9, abs=1e-9)


def test_dm_power_grows_with_length():
    rng = np.random.default_rng(5)
    stats = []
    for T in (50, 200, 800):
        b = rng.normal(0, 1, T)
        a = b + 1.0 + rng.normal(0, 2, T)
        stats.append(dm_test(a, b).statistic)
    assert stats[0] < stats[1] < stats[2]
    assert stats[2] / stats[0] == pytest.approx(4.0, rel=0.35)
    assert dm_test(a, b).p_value < 1e-6


def test_dm_null_rejection_rate_with_autocorrelation():
    # MA(1) loss differential with a two-day horizon kernel
    rng = np.random.default_rng(6)
    rejections = 0
    for _ in range(500):
        e = rng.standard_normal(201)
        d = e[1:] + 0.5 * e[:-1]
        rejections += dm_test(d, np.zeros_like(d), horizon_days=2).p_value < 0.05
    assert 0.02 <= rejections / 500 <= 0.09


def test_dm_short_series():
    with pytest.raises(ValueError, match="at least 10"):
        dm_test(np.ones(5), np.zeros(5))


def test_dm_constant_difference():
    a = np.linspace(1, 2, 30)
    res = dm_test(a, a + 0.5)
    assert res.statistic == -np.inf and res.p_value == 0.0


# -- KS subsampling -------------------------------------------------------------

def test_ks_uniform_grid_near_one():
    # every subsample is the whole grid
    pits = (np.arange(1000) + 0.5) / 1000
    assert ks_uniform_subsampled(pits, n_samples=20, seed=0) > 0.999


def test_ks_constant_pits():
    assert ks_uniform_subsampled(np.full(3000, 0.5), n_samples=50, seed=0) < 1e-6


def test_ks_uniform_draws_mean_half():
    pits = np.random.default_rng(7).uniform(size=20_000)
    assert ks_uniform_subsampled(pits, n_samples=300, seed=1) == pytest.approx(0.5, abs=0.05)


def test_ks_small_population_warns(caplog):
    with caplog.at_level(logging.WARNING):
        ks_uniform_subsampled(np.random.default_rng(0).uniform(size=200), n_samples=5, seed=0)
    assert "with replacement" in caplog.text


# -- reports --------------------------------------------------------------------

def test_report_single_case_per_hour_echoes_scores():
    cases = [score_case(NormalPredictive(280.0, 1.0), _case(x, hour=h)) for x, h in ((280.3, 0), (278.8, 3))]
    table = build_report(cases).table
    assert table.loc[0, "crps"] == cases[0].crps
    assert table.loc[3, "mae"] == pytest.approx(1.2)
    assert table.loc[3, "rmse"] == pytest.approx(1.2)
    assert table.loc["overall", "n_cases"] == 2


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([0, 3, 6, 21]), st.floats(0, 5), st.floats(0, 5), st.booleans()),
                min_size=1, max_size=60))
def test_report_overall_is_case_weighted(rows):
    frame = pd.DataFrame([(h, c, e, e * e, cov) for h, c, e, cov in rows],
                         columns=["hour", "crps", "abs_err", "sq_err", "covered"])
    table = build_report(frame).table
    hours = table.drop(index="overall")
    n = hours["n_cases"]
    for col in ("crps", "mae", "coverage_pct"):
        weighted = float((hours[col] * n).sum() / n.sum())
        assert table.loc["overall", col] == pytest.approx(weighted, abs=1e-12)
    pooled = np.sqrt(float((hours["rmse"] ** 2 * n).sum() / n.sum()))
    assert table.loc["overall", "rmse"] == pytest.approx(pooled, abs=1e-12)


def test_calibrated_normal_coverage():
    rng = np.random.default_rng(8)
    mu = rng.normal(280, 5, 8000)
    sigma = rng.uniform(0.5, 3.0, 8000)
    obs = mu + sigma * rng.standard_normal(8000)
    cov = 100 * score_normal(mu, sigma, obs)["covered"].mean()
    assert cov == pytest.approx(80.0, abs=2.0)
