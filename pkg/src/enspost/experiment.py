"""Rolling-window calibration experiments.

For every verification date and forecast hour a training window of the
preceding ``training_length_days`` days is selected, each requested method
is fitted on it (per station group where clustering applies), and the
stations' forecasts for that date and hour are scored. The raw ensemble is
always scored alongside on the same cases.
"""
from __future__ import annotations

import dataclasses
import datetime as dt
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from . import bma, clustering, emos
from .clustering import KMEANS_RESTARTS
from .dataset import HOURS, Dataset, as_date, load_dataset, select_window
from .verification import (
    ScoreReport,
    build_report,
    daily_series,
    dm_test,
    histogram_frame,
    ks_uniform_subsampled,
    pit_histogram,
    score_ensemble,
    score_mixture,
    score_normal,
)

log = logging.getLogger(__name__)

METHODS = ("raw", "emos", "emos-c", "bma")
CLUSTERINGS = ("regional", "expert-altitude", "local")  # plus kmeans:<k>
FIT_ERRORS = (
    emos.TooFewCasesError,
    emos.OptimizerDivergenceError,
    bma.DegenerateRegressorError,
    clustering.InsufficientDataError,
)
FORECAST_COLUMNS = ["model", "date", "hour", "station_id", "obs", "mean", "median", "q10", "q90",
                    "pit", "crps", "abs_err", "sq_err", "covered", "rank"]
FLOAT_FORMAT = "%.8f"


class ConfigError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


def _int_tuple(value) -> tuple:
    if isinstance(value, str):
        return tuple(int(v) for v in value.replace(" ", "").split(",") if v)
    return tuple(int(v) for v in value)


def _str_tuple(value) -> tuple:
    if isinstance(value, str):
        return tuple(v.strip() for v in value.split(",") if v.strip())
    return tuple(value)


def _bool(value) -> bool:
    if isinstance(value, str):
        if value.strip().lower() in ("1", "true", "yes", "on"):
            return True
        if value.strip().lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    return bool(value)


def _opt_date(value):
    if value in (None, "", "none", "None"):
        return None
    return as_date(value)


def _opt_int(value):
    if value in (None, "", "none", "None"):
        return None
    return int(value)


def _opt_str(value):
    if value in (None, "", "none", "None"):
        return None
    return str(value)


@dataclass
class RunConfig:
    forecast_file: Optional[str] = None
    station_file: Optional[str] = None  # None: bundled Santiago station table
    method: tuple = ("emos",)
    bias_mode: str = "full"
    clustering: str = "expert-altitude"  # grouping used by emos-c
    training_length_days: int = 20
    training_sweep: tuple = tuple(range(10, 61, 5))
    hours: tuple = HOURS
    verify_start: Optional[dt.date] = None  # default: first date with a full training window
    verify_end: Optional[dt.date] = None
    seed: int = 0
    output_dir: str = "results"
    workers: int = 1
    dm_lags: Optional[int] = None  # None: horizon of 1 day, lag 0 only
    merge_small_clusters: bool = True
    kmeans_restarts: int = KMEANS_RESTARTS
    emos_optimizer: str = "nelder-mead"
    emos_min_cases: int = emos.MIN_CASES
    bma_min_cases: int = bma.MIN_CASES
    svg: bool = False

    _CONVERTERS = {
        "forecast_file": _opt_str,
        "station_file": _opt_str,
        "method": _str_tuple,
        "bias_mode": str,
        "clustering": str,
        "training_length_days": int,
        "training_sweep": _int_tuple,
        "hours": _int_tuple,
        "verify_start": _opt_date,
        "verify_end": _opt_date,
        "seed": int,
        "output_dir": str,
        "workers": int,
        "dm_lags": _opt_int,
        "merge_small_clusters": _bool,
        "kmeans_restarts": int,
        "emos_optimizer": str,
        "emos_min_cases": int,
        "bma_min_cases": int,
        "svg": _bool,
    }

    def updated(self, **values) -> "RunConfig":
        """Copy with ``values`` (strings or typed) converted and validated."""
        unknown = set(values) - set(self._CONVERTERS)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        converted = {k: self._CONVERTERS[k](v) for k, v in values.items()}
        cfg = dataclasses.replace(self, **converted)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        bad = [m for m in self.method if m not in METHODS]
        if bad or not self.method:
            raise ConfigError(f"method must be drawn from {METHODS}, got {self.method}")
        if self.bias_mode not in bma.BIAS_MODES:
            raise ConfigError(f"bias_mode must be one of {bma.BIAS_MODES}")
        parse_clustering(self.clustering)
        if "emos-c" in self.method and self.clustering == "regional":
            raise ConfigError("emos-c needs a clustering other than 'regional' (that is plain emos)")
        if self.training_length_days < 1 or any(n < 1 for n in self.training_sweep):
            raise ConfigError("training lengths must be at least 1 day")
        if any(h not in HOURS for h in self.hours):
            raise ConfigError(f"hours must be drawn from {HOURS}")
        if self.emos_optimizer not in ("nelder-mead", "lbfgs"):
            raise ConfigError("emos_optimizer must be 'nelder-mead' or 'lbfgs'")
        if self.workers < 1:
            raise ConfigError("workers must be positive")
        if self.dm_lags is not None and self.dm_lags < 1:
            raise ConfigError("dm_lags is the DM horizon in days and must be at least 1")

    def as_lines(self) -> list:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif value is None:
                value = "none"
            lines.append(f"{f.name} = {value}")
        return lines


def read_config_file(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    values = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def parse_clustering(spec: str):
    if spec in CLUSTERINGS:
        return spec, None
    if spec.startswith("kmeans:"):
        try:
            k = int(spec.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad k in clustering {spec!r}") from None
        if k < 2:
            raise ConfigError("kmeans needs k >= 2")
        return "kmeans", k
    raise ConfigError(f"clustering must be one of {CLUSTERINGS} or kmeans:<k>, got {spec!r}")


def task_seed(seed: int, date: dt.date, hour: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, date.toordinal(), hour])


# -- clustering per window ----------------------------------------------------

def raw_assignment(ds: Dataset, window, cfg: RunConfig, seed: int) -> tuple:
    """Station grouping for ``window`` before any merging, plus group centroids."""
    kind, k = parse_clustering(cfg.clustering)
    ids = list(ds.stations)
    d, h = window.target_date, window.hour
    if kind == "regional":
        a = clustering.regional(ids, d, h)
        return a, {}
    if kind == "local":
        a = clustering.local(ids, d, h)
        return a, clustering.altitude_centroids(a, ds.stations)
    if kind == "expert-altitude":
        a = clustering.expert_altitude_clusters(ds.stations.values(), d, h)
        return a, clustering.altitude_centroids(a, ds.stations)

    feats = []
    for s in ids:
        try:
            feats.append(clustering.build_features(ds, s, window))
        except clustering.InsufficientDataError:
            pass
    if len(feats) < k:
        log.warning("%s %02d UTC: only %d station(s) with features for k=%d; using one group", d, h, len(feats), k)
        return clustering.regional(ids, d, h), {}
    a = clustering.kmeans_cluster(feats, k, seed=seed, target_date=d, hour=h, n_init=cfg.kmeans_restarts)
    leftovers = [s for s in ids if s not in a.stations]
    if leftovers:
        counts = window.station_counts()
        groups = [list(g) for g in a.groups]
        biggest = max(range(len(groups)), key=lambda i: (sum(counts.get(s, 0) for s in groups[i]), -i))
        groups[biggest].extend(leftovers)
        a = clustering.ClusterAssignment(d, h, a.method, tuple(tuple(g) for g in groups))
        cents = clustering.feature_centroids(a, feats)
        return a, cents
    return a, clustering.feature_centroids(a, feats)


def window_assignment(ds: Dataset, window, cfg: RunConfig, seed: int) -> clustering.ClusterAssignment:
    a, cents = raw_assignment(ds, window, cfg, seed)
    if cfg.merge_small_clusters and len(a.groups) > 1:
        a = clustering.merge_small_groups(a, window.station_counts(), cfg.emos_min_cases, cents)
    return a


# -- one (date, hour) task -------------------------------------------------------

def _frame(model, date, hour, sids, obs, scores: pd.DataFrame) -> pd.DataFrame:
    out = pd.DataFrame({"model": model, "date": date.isoformat(), "hour": hour,
                        "station_id": sids, "obs": obs})
    out = pd.concat([out, scores.reset_index(drop=True)], axis=1)
    if "rank" not in out:
        out["rank"] = pd.NA
    return out[FORECAST_COLUMNS]


def run_task(ds: Dataset, cfg: RunConfig, date: dt.date, hour: int, training_length: Optional[int] = None):
    """Fit and score every configured method at (date, hour).

    Returns a forecasts frame, or a (date, hour, reason) tuple when the case
    set is empty or some fit is impossible (then no model is scored).
    """
    n = training_length or cfg.training_length_days
    target = np.datetime64(date, "D")
    test = (ds.dates == target) & (ds.hours == hour) & ~np.isnan(ds.obs)
    if not test.any():
        return (date, hour, "no verifying observations")
    sids, f_test, y_test = ds.station_ids[test], ds.members[test], ds.obs[test]
    window = select_window(ds, date, hour, n)
    seeds = task_seed(cfg.seed, date, hour).spawn(3)
    fit_seed = int(seeds[0].generate_state(1)[0])

    all_stations = tuple(sorted(ds.stations))
    fits = {}

    def emos_fit(stations):
        # a group covering every station is the regional window; fit it once
        key = tuple(sorted(stations))
        if key not in fits:
            w = window if key == all_stations else window.restrict(key)
            fits[key] = emos.fit_emos(w, seed=fit_seed, method=cfg.emos_optimizer, min_cases=cfg.emos_min_cases)
        return fits[key]

    frames = []
    try:
        for method in cfg.method:
            if method == "raw":
                continue
            if method == "emos":
                p = emos_fit(all_stations)
                mu, sigma = p.predict_arrays(f_test)
                scores = score_normal(mu, sigma, y_test)
            elif method == "emos-c":
                assignment = window_assignment(ds, window, cfg, int(seeds[1].generate_state(1)[0]))
                mu = np.empty(len(y_test))
                sigma = np.empty(len(y_test))
                group = np.array([assignment.group_of(int(s)) for s in sids])
                for g, stations in enumerate(assignment.groups):
                    sel = group == g
                    if not sel.any():
                        continue
                    p = emos_fit(stations)
                    mu[sel], sigma[sel] = p.predict_arrays(f_test[sel])
                scores = score_normal(mu, sigma, y_test)
            elif method == "bma":
                beta0, beta1 = bma.fit_bias(window, cfg.bias_mode)
                em = bma.fit_em(window, beta0, beta1, min_cases=cfg.bma_min_cases)
                means = beta0 + beta1 * f_test
                scores = score_mixture(em.weights, means, np.full(len(y_test), em.sigma), y_test)
            frames.append(_frame(method, date, hour, sids, y_test, scores))
    except FIT_ERRORS as exc:
        log.warning("skipping %s %02d UTC: %s", date, hour, exc)
        return (date, hour, str(exc))

    rng = np.random.default_rng(seeds[2])
    frames.insert(0, _frame("raw", date, hour, sids, y_test, score_ensemble(f_test, y_test, rng)))
    return pd.concat(frames, ignore_index=True)


_WORKER_STATE = {}


def _init_worker(ds, cfg):
    _WORKER_STATE["ds"] = ds
    _WORKER_STATE["cfg"] = cfg


def _worker(args):
    date, hour, n = args
    return run_task(_WORKER_STATE["ds"], _WORKER_STATE["cfg"], date, hour, n)


@dataclass
class ExperimentResult:
    forecasts: pd.DataFrame
    skipped: list = field(default_factory=list)
    config: Optional[RunConfig] = None

    @property
    def models(self) -> list:
        order = {m: i for i, m in enumerate(METHODS)}
        return sorted(self.forecasts["model"].unique(), key=lambda m: order.get(m, len(order)))

    def report(self, model: str) -> ScoreReport:
        return build_report(self.forecasts[self.forecasts["model"] == model])

    def reports(self) -> dict:
        return {m: self.report(m) for m in self.models}


def verification_dates(ds: Dataset, cfg: RunConfig, training_length: int) -> list:
    start = cfg.verify_start or ds.first_date + dt.timedelta(days=training_length)
    end = cfg.verify_end or ds.last_date
    return [d for d in ds.unique_dates() if start <= d <= end]


def load_config_data(cfg: RunConfig) -> Dataset:
    if cfg.forecast_file is None:
        raise ConfigError("forecast_file is required")
    return load_dataset(cfg.forecast_file, cfg.station_file)


def run_experiment(cfg: RunConfig, ds: Optional[Dataset] = None, training_length: Optional[int] = None,
                   dates: Optional[Sequence[dt.date]] = None) -> ExperimentResult:
    """Run every (date, hour) task and collect the scored forecasts.

    Tasks run in a pool of ``cfg.workers`` processes; results are gathered
    in task order so output does not depend on the worker count.
    """
    cfg.validate()
    ds = ds if ds is not None else load_config_data(cfg)
    n = training_length or cfg.training_length_days
    dates = list(dates) if dates is not None else verification_dates(ds, cfg, n)
    tasks = [(d, h, n) for h in cfg.hours for d in dates]
    log.info("running %d (date, hour) tasks for %s with %d-day windows", len(tasks), ",".join(cfg.method), n)

    if cfg.workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(cfg.workers, initializer=_init_worker, initargs=(ds, cfg)) as pool:
            results = list(pool.map(_worker, tasks, chunksize=max(1, len(tasks) // (4 * cfg.workers))))
    else:
        results = [run_task(ds, cfg, d, h, n) for d, h, n in tasks]

    frames = [r for r in results if isinstance(r, pd.DataFrame)]
    skipped = [r for r in results if not isinstance(r, pd.DataFrame)]
    forecasts = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=FORECAST_COLUMNS)
    return ExperimentResult(forecasts, skipped, cfg)


# -- outputs -----------------------------------------------------------------------

def scores_frame(result: ExperimentResult) -> pd.DataFrame:
    rows = []
    for model, report in result.reports().items():
        t = report.table.reset_index()
        t.insert(0, "model", model)
        rows.append(t)
    if not rows:
        return pd.DataFrame(columns=["model", "hour", "crps", "rmse", "mae", "coverage_pct", "n_cases"])
    out = pd.concat(rows, ignore_index=True)
    out["hour"] = out["hour"].astype(str)
    out["n_cases"] = out["n_cases"].astype(int)
    return out


def ks_frame(forecasts: pd.DataFrame, seed: int) -> pd.DataFrame:
    rows = []
    for model, g in forecasts.groupby("model", sort=True):
        pits = g["pit"].to_numpy(dtype=float)
        if np.isnan(pits).all():
            continue
        rows.append((model, ks_uniform_subsampled(pits, seed=seed)))
    return pd.DataFrame(rows, columns=["model", "mean_p_value"])


def histogram_frames(forecasts: pd.DataFrame) -> dict:
    out = {}
    for model, g in forecasts.groupby("model", sort=True):
        if model == "raw":
            ranks = g["rank"].dropna().to_numpy(dtype=int)
            out[f"hist_rank_{model}"] = histogram_frame(np.bincount(ranks - 1, minlength=10))
        else:
            out[f"hist_pit_{model}"] = histogram_frame(pit_histogram(g["pit"].to_numpy(dtype=float)))
    return out


def _write_csv(frame: pd.DataFrame, path: Path, exact: bool = False) -> None:
    # summaries use a fixed format; per-case tables keep full precision so they re-score exactly
    frame.to_csv(path, index=False, float_format=None if exact else FLOAT_FORMAT, lineterminator="\n")


def write_histogram_svg(frame: pd.DataFrame, title: str, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3))
    ax.bar(frame["bin"], frame["relative_frequency"], color="0.6", edgecolor="k")
    ax.axhline(1.0 / len(frame), color="k", ls="--", lw=0.8)
    ax.set_title(title)
    ax.set_ylabel("Relative frequency")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def write_summary(forecasts: pd.DataFrame, out: Path, seed: int, svg: bool = False,
                  skipped: Sequence = ()) -> None:
    """scores.csv, hist_*.csv, ks.csv (and SVG histograms) from a forecasts table."""
    out.mkdir(parents=True, exist_ok=True)
    result = ExperimentResult(forecasts, list(skipped))
    _write_csv(scores_frame(result), out / "scores.csv")
    for name, frame in histogram_frames(forecasts).items():
        _write_csv(frame, out / f"{name}.csv")
        if svg:
            write_histogram_svg(frame, name.replace("hist_", "").replace("_", " "), out / f"{name}.svg")
    _write_csv(ks_frame(forecasts, seed), out / "ks.csv")


def write_outputs(result: ExperimentResult, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = result.config or RunConfig()
    _write_csv(result.forecasts, out / "forecasts.csv", exact=True)
    write_summary(result.forecasts, out, cfg.seed, cfg.svg)
    skipped = pd.DataFrame(
        [(d.isoformat(), h, reason) for d, h, reason in result.skipped], columns=["date", "hour", "reason"]
    )
    _write_csv(skipped, out / "skipped.csv")
    (out / "config.txt").write_text("\n".join(cfg.as_lines()) + "\n")
    return out


def read_forecasts(run_dir) -> pd.DataFrame:
    path = Path(run_dir) / "forecasts.csv"
    frame = pd.read_csv(path, dtype={"date": str, "model": str}, float_precision="round_trip")
    missing = set(FORECAST_COLUMNS) - set(frame.columns)
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")
    return frame


# -- training-length sweep ---------------------------------------------------------

def run_sweep(cfg: RunConfig, ds: Optional[Dataset] = None) -> pd.DataFrame:
    """Mean CRPS per model, training length and hour on a common case set.

    Verification starts once the longest window fits (unless ``verify_start``
    is set) and only (date, hour) pairs scored for every length are kept.
    """
    ds = ds if ds is not None else load_config_data(cfg)
    lengths = sorted(cfg.training_sweep)
    dates = verification_dates(ds, cfg, max(lengths))
    runs = {n: run_experiment(cfg, ds, training_length=n, dates=dates).forecasts for n in lengths}
    keys = None
    for f in runs.values():
        k = set(zip(f["date"], f["hour"]))
        keys = k if keys is None else keys & k
    rows = []
    for n, f in runs.items():
        f = f[[(d, h) in keys for d, h in zip(f["date"], f["hour"])]]
        for model, g in f.groupby("model", sort=True):
            if model == "raw":
                continue
            for hour, gh in g.groupby("hour", sort=True):
                rows.append((model, n, str(hour), float(gh["crps"].mean()), len(gh)))
            rows.append((model, n, "overall", float(g["crps"].mean()), len(g)))
    return pd.DataFrame(rows, columns=["model", "length_days", "hour", "crps", "n_cases"])


# -- pairwise DM comparison -----------------------------------------------------------

def _labelled_series(run_dirs: Sequence) -> dict:
    tables = [(Path(d), read_forecasts(d)) for d in run_dirs]
    seen = {}
    for path, f in tables:
        for m in f["model"].unique():
            seen[m] = seen.get(m, 0) + 1
    out = {}
    for path, f in tables:
        for m, g in f.groupby("model", sort=False):
            label = m if seen[m] == 1 else f"{path.name}/{m}"
            base, i = label, 2
            while label in out:
                label = f"{base}#{i}"
                i += 1
            out[label] = g.sort_values(["date", "hour", "station_id"]).reset_index(drop=True)
    return out


def check_alignment(series: dict) -> None:
    labels = list(series)
    ref_label = labels[0]
    ref = set(zip(series[ref_label]["date"], series[ref_label]["hour"], series[ref_label]["station_id"]))
    for label in labels[1:]:
        keys = set(zip(series[label]["date"], series[label]["hour"], series[label]["station_id"]))
        if keys != ref:
            first = min(keys ^ ref)
            where = ref_label if first in ref else label
            raise AlignmentError(
                f"case sets of '{ref_label}' and '{label}' differ; first mismatch "
                f"(date={first[0]}, hour={first[1]}, station_id={first[2]}) only in '{where}'"
            )


def compare_runs(run_dirs: Sequence, dm_lags: Optional[int] = None, hours: Optional[Sequence[int]] = None) -> pd.DataFrame:
    """Pairwise DM statistics (row minus column) for CRPS and absolute error of the median.

    Score series are daily means over stations, tested separately per hour
    and overall. Returns a long table with one row per (scope, score, row, col).
    """
    series = _labelled_series(run_dirs)
    check_alignment(series)
    labels = list(series)
    horizon = dm_lags or 1
    any_frame = next(iter(series.values()))
    scopes = [None] + sorted(int(h) for h in any_frame["hour"].unique() if hours is None or int(h) in hours)
    rows = []
    for scope in scopes:
        for score, column in (("crps", "crps"), ("ae", "abs_err")):
            daily = {lab: daily_series(series[lab], column, scope) for lab in labels}
            for r in labels:
                for c in labels:
                    res = dm_test(daily[r].to_numpy(), daily[c].to_numpy(), horizon)
                    rows.append(("overall" if scope is None else str(scope), score, r, c,
                                 res.statistic, res.p_value, bool(res.p_value < 0.05)))
    return pd.DataFrame(rows, columns=["hour", "score", "row", "col", "statistic", "p_value", "significant"])


def dm_matrix(tests: pd.DataFrame, score: str) -> pd.DataFrame:
    """Square matrix per hour; cells are statistics, a trailing '*' marks 5% significance."""
    sub = tests[tests["score"] == score]
    labels = list(dict.fromkeys(sub["row"]))
    out = []
    for hour, g in sub.groupby("hour", sort=False):
        cell = {(r, c): (s, sig) for r, c, s, sig in zip(g["row"], g["col"], g["statistic"], g["significant"])}
        for r in labels:
            row = {"hour": hour, "model": r}
            for c in labels:
                s, sig = cell[(r, c)]
                row[c] = f"{s:.3f}{'*' if sig else ''}"
            out.append(row)
    return pd.DataFrame(out, columns=["hour", "model"] + labels)


def dm_combined(tests: pd.DataFrame) -> pd.DataFrame:
    """CRPS statistics above the diagonal, AE-of-median below."""
    crps = dm_matrix(tests, "crps")
    ae = dm_matrix(tests, "ae")
    labels = list(crps.columns[2:])
    out = crps.copy()
    for i in range(len(out)):
        r = labels.index(out.iloc[i]["model"])
        for j, c in enumerate(labels):
            if j < r:
                out.iloc[i, 2 + j] = ae.iloc[i, 2 + j]
            elif j == r:
                out.iloc[i, 2 + j] = ""
    return out


def write_comparison(tests: pd.DataFrame, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(tests, out / "dm_tests.csv")
    _write_csv(dm_matrix(tests, "crps"), out / "dm_matrix_crps.csv")
    _write_csv(dm_matrix(tests, "ae"), out / "dm_matrix_ae.csv")
    _write_csv(dm_combined(tests), out / "dm_matrix.csv")
    return out
