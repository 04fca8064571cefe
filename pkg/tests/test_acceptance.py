"""Acceptance criteria, one or more tests each.

The terminal summary prints a PASS/FAIL line per criterion (see conftest.py).
"""
import time
import warnings

import numpy as np
import pandas as pd
import pytest
from scipy.stats import chisquare, kstest

from enspost import bma, experiment
from enspost.cli import main
from enspost.clustering import expert_altitude_clusters
from enspost.dataset import default_stations
from enspost.distributions import crps_ensemble, crps_mixture, crps_normal, std_normal_cdf
from enspost.emos import fit_emos
from enspost.synthetic import generate, preset
from enspost.verification import coverage_nominal, dm_test, ks_uniform_subsampled, rank_histogram

import oracles
import simdata

C = pytest.mark.criterion
GRID = 4001  # nodes per side of x for the end-corrected trapezoid oracle


@C(1, "closed-form normal and mixture CRPS match trapezoid integration (1e-6, < 10 s)")
def test_crps_closed_forms_match_integration():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    n = 1000

    mu = rng.uniform(250, 310, n)
    sigma = rng.uniform(0.2, 5.0, n)
    x = mu + sigma * rng.uniform(-4, 4, n)
    lo, hi = mu - 12 * sigma, mu + 12 * sigma
    ref = oracles.trapezoid_crps_batch(lambda y: oracles.phi_cdf((y - mu[:, None]) / sigma[:, None]), x, lo, hi,
                                       n=GRID, pdf_at_x=oracles.phi_pdf((x - mu) / sigma) / sigma)
    err_normal = np.max(np.abs(crps_normal(mu, sigma, x) - ref))

    w = rng.dirichlet(np.ones(9), n)
    means = rng.uniform(260, 300, n)[:, None] + rng.normal(0, 3, (n, 9))
    s = rng.uniform(0.3, 3.0, n)
    x = means.mean(axis=1) + rng.normal(0, 5, n)
    lo, hi = means.min(axis=1) - 12 * s, means.max(axis=1) + 12 * s
    err_mixture = 0.0
    for i in range(0, n, 50):
        sl = slice(i, i + 50)

        def cdf(y, sl=sl):
            z = (y[:, :, None] - means[sl, None, :]) / s[sl, None, None]
            return np.sum(w[sl, None, :] * oracles.phi_cdf(z), axis=-1)

        dens = np.sum(w[sl] * oracles.phi_pdf((x[sl, None] - means[sl]) / s[sl, None]), axis=1) / s[sl]
        ref = oracles.trapezoid_crps_batch(cdf, x[sl], lo[sl], hi[sl], n=GRID, pdf_at_x=dens)
        got = crps_mixture(w[sl], means[sl], s[sl], x[sl])
        err_mixture = max(err_mixture, float(np.max(np.abs(got - ref))))
    elapsed = time.perf_counter() - start
    print(f"max |error| normal {err_normal:.2e}, mixture {err_mixture:.2e}; {elapsed:.1f} s")
    assert err_normal < 1e-6
    assert err_mixture < 1e-6
    assert elapsed < 10.0


@C(2, "raw-ensemble CRPS equals the pairwise expectation form (1e-12)")
def test_ensemble_crps_pairwise():
    rng = np.random.default_rng(7)
    members = rng.uniform(260, 300, (1000, 9)) + rng.normal(0, 2, (1000, 9))
    x = rng.uniform(255, 305, 1000)
    got = crps_ensemble(members, x)
    ref = np.array([oracles.pairwise_ensemble_crps(m, xi) for m, xi in zip(members, x)])
    print(f"max |error| {np.max(np.abs(got - ref)):.2e}")
    assert np.max(np.abs(got - ref)) < 1e-12


@C(3, "EMOS recovers a0 and sum(a) within 0.15 at 5000 cases, out-of-sample PIT passes KS at 1% (< 60 s)")
def test_emos_recovery():
    start = time.perf_counter()
    p = fit_emos(simdata.emos_window(5000, seed=101))
    members, obs = simdata.emos_sample(5000, seed=102)
    mu, sigma = p.predict_arrays(members)
    ks_p = kstest(std_normal_cdf((obs - mu) / sigma), "uniform").pvalue
    elapsed = time.perf_counter() - start
    print(f"a0 {p.a0:.4f} (truth 2), sum a {sum(p.a):.4f} (truth 1), b0 {p.b0:.3f}, b1 {p.b1:.3f}, "
          f"KS p {ks_p:.3f}; {elapsed:.1f} s")
    assert abs(p.a0 - simdata.EMOS_A0) <= 0.15
    assert abs(sum(p.a) - 1.0) <= 0.15
    assert ks_p > 0.01
    assert elapsed < 60.0


@C(4, "EM log-likelihood nondecreasing on 100 windows; two-component weights within 0.05")
def test_em_monotone_on_random_windows():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(270, 600))
        c = rng.uniform(260, 300, n)
        f = c[:, None] + rng.normal(rng.normal(0, 2, 9), rng.uniform(0.3, 2.0), (n, 9))
        y = c + rng.normal(rng.normal(0, 1), rng.uniform(0.5, 3.0), n)
        w = simdata.TrainingWindow.from_arrays(f, y)
        beta0, beta1 = bma.fit_bias(w, rng.choice(bma.BIAS_MODES))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", bma.EmConvergenceWarning)
            em = bma.fit_em(w, beta0, beta1)
        worst = min(worst, float(np.min(np.diff(em.loglik) / np.abs(em.loglik[:-1]))))
    print(f"largest relative log-likelihood decrease {-worst:.2e}")
    assert worst >= -1e-12


@C(4, "EM log-likelihood nondecreasing on 100 windows; two-component weights within 0.05")
def test_em_two_component_recovery():
    em = bma.fit_em(simdata.two_component_window(5000, seed=44), np.zeros(9), np.ones(9))
    print(f"weights {np.round(em.weights, 3)}, sigma {em.sigma:.3f}")
    assert abs(em.weights[0] - 0.7) <= 0.05
    assert abs(em.weights[1] - 0.3) <= 0.05


@C(5, "underdispersed preset: EMOS, EMOS-C, BMA beat raw CRPS; 80% coverage in [75, 85] vs raw < 70 (< 10 min)")
def test_calibration_direction():
    ds = generate(preset("underdispersed"))
    assert (len(ds.stations), len(ds.unique_dates()), len(set(ds.hours))) == (19, 120, 8)
    cfg = experiment.RunConfig(method=("emos", "emos-c", "bma"), workers=1)
    start = time.perf_counter()
    result = experiment.run_experiment(cfg, ds)
    elapsed = time.perf_counter() - start
    overall = {m: r.overall() for m, r in result.reports().items()}
    for m, row in overall.items():
        print(f"{m:7s} CRPS {row['crps']:.4f}  coverage {row['coverage_pct']:.1f}%  n {int(row['n_cases'])}")
    print(f"{elapsed:.0f} s")
    raw = overall["raw"]
    assert raw["coverage_pct"] < 70
    for m in ("emos", "emos-c", "bma"):
        assert overall[m]["crps"] < raw["crps"]
        assert 75 <= overall[m]["coverage_pct"] <= 85
        assert overall[m]["n_cases"] == raw["n_cases"]
    assert elapsed < 600


@C(6, "expert altitude clustering of the station table")
def test_expert_clustering_fixture():
    a = expert_altitude_clusters(default_stations())
    assert a.groups == ((1, 10, 12, 17), (2, 3, 4, 5, 6, 7, 8, 13, 15, 16, 18), (9, 11, 14, 19))


@C(7, "nominal coverage of a 9-member ensemble is 0.80")
def test_nominal_coverage():
    assert coverage_nominal(9) == 0.8


@C(8, "DM antisymmetry (1e-12) and 5% null rejection rate in [2%, 9%] over 500 replications")
def test_dm_antisymmetry():
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(200):
        a, b = rng.gamma(2.0, 0.5, (2, 60))
        h = int(rng.integers(1, 4))
        worst = max(worst, abs(dm_test(a, b, h).statistic + dm_test(b, a, h).statistic))
    assert worst <= 1e-12


@C(8, "DM antisymmetry (1e-12) and 5% null rejection rate in [2%, 9%] over 500 replications")
def test_dm_null_rejection_rate():
    # two forecasters with identically distributed CRPS-like scores on a common AR(1) weather signal
    rng = np.random.default_rng(88)
    rejections = 0
    for _ in range(500):
        T = 100
        common = np.empty(T)
        common[0] = rng.normal()
        for t in range(1, T):
            common[t] = 0.5 * common[t - 1] + rng.normal()
        a = np.abs(common + rng.normal(0, 1, T))
        b = np.abs(common + rng.normal(0, 1, T))
        rejections += dm_test(a, b).p_value < 0.05
    rate = rejections / 500
    print(f"rejection rate {rate:.3f}")
    assert 0.02 <= rate <= 0.09


@C(9, "KS subsampling: uniform PITs mean p in [0.40, 0.60]; constant PITs mean p < 1e-6")
def test_ks_subsampling():
    pits = np.random.default_rng(9).uniform(size=20_000)
    uniform = ks_uniform_subsampled(pits, n_samples=1000, sample_size=1000, seed=0)
    constant = ks_uniform_subsampled(np.full(20_000, 0.5), n_samples=1000, sample_size=1000, seed=0)
    print(f"uniform {uniform:.3f}, constant {constant:.2e}")
    assert 0.40 <= uniform <= 0.60
    assert constant < 1e-6


@C(10, "rank histogram: exchangeable ensemble passes chi-square at 1%; spread factor 0.5 end bins > 2x uniform")
def test_rank_histograms():
    calibrated = generate(preset("calibrated", n_days=70, seed=10))
    counts = rank_histogram(calibrated.members, calibrated.obs, seed=0)
    p = chisquare(counts).pvalue
    narrow = generate(preset("calibrated", spread_factor=0.5, n_days=70, seed=10))
    narrow_counts = rank_histogram(narrow.members, narrow.obs, seed=0)
    ends = (narrow_counts[0] + narrow_counts[-1]) / narrow_counts.sum()
    print(f"{counts.sum()} cases, chi-square p {p:.3f}; spread 0.5 end-bin mass {ends:.3f} (uniform 0.2)")
    assert counts.sum() >= 10_000
    assert p > 0.01
    assert ends > 2 * 0.2


@C(11, "repeated calibrate runs with a fixed seed give byte-identical scores.csv")
def test_determinism(tmp_path):
    data = tmp_path / "data"
    assert main(["simulate", "--preset", "andes", "--n-days", "32", "--hours", "0,12", "-o", str(data)]) == 0
    outputs = []
    for run in ("first", "second"):
        out = tmp_path / run
        args = ["calibrate", "--forecasts", str(data / "forecasts.csv"), "--stations", str(data / "stations.csv"),
                "--method", "emos,emos-c,bma", "--clustering", "kmeans:2", "--hours", "0,12", "--seed", "5",
                "-o", str(out)]
        assert main(args) == 0
        outputs.append((out / "scores.csv").read_bytes())
    assert outputs[0] == outputs[1]
    assert len(pd.read_csv(tmp_path / "first" / "scores.csv")) == 4 * 3
