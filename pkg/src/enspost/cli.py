"""Command-line entry point: ``enspost <subcommand> [options]``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import pandas as pd

from . import experiment, synthetic
from .dataset import DataError, write_dataset
from .experiment import ConfigError, RunConfig

log = logging.getLogger("enspost")

# flag name -> RunConfig key for options shared by the run-style subcommands
RUN_FLAGS = {
    "forecasts": "forecast_file",
    "stations": "station_file",
    "method": "method",
    "bias_mode": "bias_mode",
    "clustering": "clustering",
    "training_length": "training_length_days",
    "training_sweep": "training_sweep",
    "hours": "hours",
    "verify_start": "verify_start",
    "verify_end": "verify_end",
    "seed": "seed",
    "output": "output_dir",
    "workers": "workers",
    "dm_lags": "dm_lags",
    "merge_small_clusters": "merge_small_clusters",
    "kmeans_restarts": "kmeans_restarts",
    "emos_optimizer": "emos_optimizer",
    "emos_min_cases": "emos_min_cases",
    "bma_min_cases": "bma_min_cases",
    "svg": "svg",
}


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat 'key = value' config file; flags override it")
    p.add_argument("--print-config", action="store_true", help="print the effective configuration and exit")
    p.add_argument("--forecasts", help="forecast CSV (date,hour,station_id,m1..m9,obs)")
    p.add_argument("--stations", help="station CSV (default: bundled Santiago stations)")
    p.add_argument("--method", help="comma list from raw,emos,emos-c,bma")
    p.add_argument("--bias-mode", choices=("full", "additive", "none"))
    p.add_argument("--clustering", help="regional, expert-altitude, local or kmeans:<k> (used by emos-c)")
    p.add_argument("--training-length", type=int, help="training window in days")
    p.add_argument("--training-sweep", help="comma list of window lengths for 'sweep'")
    p.add_argument("--hours", help="comma list of forecast hours (UTC)")
    p.add_argument("--verify-start", help="first verification date (YYYY-MM-DD)")
    p.add_argument("--verify-end", help="last verification date (YYYY-MM-DD)")
    p.add_argument("--seed", type=int)
    p.add_argument("--output", "-o", help="output directory")
    p.add_argument("--workers", type=int, help="worker processes for the (date, hour) tasks")
    p.add_argument("--dm-lags", type=int, help="DM forecast horizon in days (autocovariance lags 0..h-1)")
    p.add_argument("--merge-small-clusters", choices=("true", "false"))
    p.add_argument("--kmeans-restarts", type=int)
    p.add_argument("--emos-optimizer", choices=("nelder-mead", "lbfgs"))
    p.add_argument("--emos-min-cases", type=int)
    p.add_argument("--bma-min-cases", type=int)
    p.add_argument("--svg", action="store_const", const="true", help="also render histograms as SVG")


def build_config(args: argparse.Namespace) -> RunConfig:
    values = experiment.read_config_file(args.config) if getattr(args, "config", None) else {}
    for flag, key in RUN_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            values[key] = value
    return RunConfig().updated(**values)


def _print_config(cfg: RunConfig) -> int:
    print("\n".join(cfg.as_lines()))
    return 0


def cmd_calibrate(args) -> int:
    cfg = build_config(args)
    if args.print_config:
        return _print_config(cfg)
    result = experiment.run_experiment(cfg)
    out = experiment.write_outputs(result, cfg.output_dir)
    overall = experiment.scores_frame(result)
    overall = overall[overall["hour"] == "overall"]
    print(overall.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    if result.skipped:
        print(f"{len(result.skipped)} (date, hour) task(s) skipped; see {out / 'skipped.csv'}")
    print(f"outputs written to {out}")
    return 0


def cmd_verify(args) -> int:
    """Rebuild the score tables from an existing run's forecasts.csv."""
    frame = experiment.read_forecasts(args.run_dir)
    if args.hours:
        keep = {int(h) for h in args.hours.split(",")}
        frame = frame[frame["hour"].isin(keep)]
    out = Path(args.output or args.run_dir)
    experiment.write_summary(frame, out, args.seed, svg=args.svg)
    scores = pd.read_csv(out / "scores.csv", dtype={"hour": str})
    print(scores.to_string(index=False))
    return 0


def cmd_cluster(args) -> int:
    cfg = build_config(args)
    if args.print_config:
        return _print_config(cfg)
    ds = experiment.load_config_data(cfg)
    rows = []
    for hour in cfg.hours:
        for date in experiment.verification_dates(ds, cfg, cfg.training_length_days):
            window = experiment.select_window(ds, date, hour, cfg.training_length_days)
            seeds = experiment.task_seed(cfg.seed, date, hour).spawn(3)
            try:
                a, _ = experiment.raw_assignment(ds, window, cfg, int(seeds[1].generate_state(1)[0]))
            except experiment.clustering.InsufficientDataError as exc:
                log.warning("no clustering for %s %02d UTC: %s", date, hour, exc)
                continue
            for cid, group in enumerate(a.groups, 1):
                rows.extend((date.isoformat(), hour, a.method, s, cid) for s in group)
    frame = pd.DataFrame(rows, columns=["target_date", "hour", "method", "station_id", "cluster_id"])
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out / "clusters.csv", index=False, lineterminator="\n")
    print(f"{len(frame)} assignments written to {out / 'clusters.csv'}")
    return 0


def cmd_simulate(args) -> int:
    overrides = {}
    for name in ("n_stations", "n_days", "seed", "spread_factor", "altitude_bias_slope", "missing_rate"):
        value = getattr(args, name)
        if value is not None:
            overrides[name] = value
    if args.hours:
        overrides["hours"] = tuple(int(h) for h in args.hours.split(","))
    if args.member_biases:
        overrides["member_biases"] = tuple(float(b) for b in args.member_biases.split(","))
    spec = synthetic.preset(args.preset, **overrides)
    ds = synthetic.generate(spec)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(ds, out / "forecasts.csv", out / "stations.csv")
    print(f"{len(ds)} cases for {len(ds.stations)} stations written to {out}")
    return 0


def cmd_sweep(args) -> int:
    cfg = build_config(args)
    if args.print_config:
        return _print_config(cfg)
    frame = experiment.run_sweep(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out / "sweep.csv", index=False, float_format=experiment.FLOAT_FORMAT, lineterminator="\n")
    best = frame[frame["hour"] == "overall"].sort_values("crps").groupby("model").head(1)
    print(best.to_string(index=False))
    return 0


def cmd_compare(args) -> int:
    hours = [int(h) for h in args.hours.split(",")] if args.hours else None
    tests = experiment.compare_runs(args.run_dirs, dm_lags=args.dm_lags, hours=hours)
    out = experiment.write_comparison(tests, args.output)
    print(experiment.dm_matrix(tests, "crps").query("hour == 'overall'").to_string(index=False))
    print(f"DM matrices written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="enspost", description="EMOS/BMA post-processing of ensemble forecasts")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="fit and score methods over rolling training windows")
    _add_run_options(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("verify", help="recompute score tables and histograms from a run directory")
    p.add_argument("run_dir")
    p.add_argument("--output", "-o", help="output directory (default: the run directory)")
    p.add_argument("--hours", help="restrict to these forecast hours")
    p.add_argument("--seed", type=int, default=0, help="seed for the KS subsampling")
    p.add_argument("--svg", action="store_true")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("cluster", help="export station groupings per training window")
    _add_run_options(p)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("simulate", help="write a synthetic forecast/station CSV pair")
    p.add_argument("--preset", default="underdispersed", choices=sorted(synthetic.PRESETS))
    p.add_argument("--output", "-o", required=True)
    p.add_argument("--n-stations", type=int)
    p.add_argument("--n-days", type=int)
    p.add_argument("--hours")
    p.add_argument("--seed", type=int)
    p.add_argument("--spread-factor", type=float)
    p.add_argument("--altitude-bias-slope", type=float)
    p.add_argument("--missing-rate", type=float)
    p.add_argument("--member-biases", help="9 comma-separated offsets in kelvin")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="mean CRPS against training-window length")
    _add_run_options(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", help="pairwise Diebold-Mariano tests between runs")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--output", "-o", required=True)
    p.add_argument("--dm-lags", type=int)
    p.add_argument("--hours")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataError, experiment.AlignmentError, KeyError, ValueError, FileNotFoundError) as exc:
        print(f"enspost: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
