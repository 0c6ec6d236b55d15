"""
Runs a full experiment from one JSON run configuration: market data -> point
forecasts -> rolling QRA backtests of every configured variant -> report bundle.

Outputs go to `qra_framework/data/<exp_name>/` (timestamped when no name is given)
and `qra_framework/data/latest` points at the most recent run. Each bundle holds
the panel, the point forecasts with their metrics, and the QRA report
(metrics.csv, aps.csv, surface CSVs, config.json).

Example usage:
python3 qra_framework/run_experiment.py --config qra_framework/configs/synthetic.json
python3 qra_framework/run_experiment.py --config qra_framework/configs/de_2015_2017.json \
    --exp_name de_2016 --jobs 4
"""

import argparse
import os
import sys
from datetime import datetime
from pathlib import Path

ROOT_DIR = os.path.dirname(os.path.abspath(__file__))
# repo root, so the script runs without installing the package
sys.path.insert(0, os.path.dirname(ROOT_DIR))

from qra import synthetic  # noqa: E402
from qra.backtest import (BacktestConfig, compare_variants,  # noqa: E402
                          comparison_table, write_report)
from qra.config import load_config, parse_day, resolve_token  # noqa: E402
from qra.core import QuantileGrid  # noqa: E402
from qra.errors import AuthError, ConfigError, QraError  # noqa: E402
from qra.ingest import (MISSING_POINTS_DEFAULT, PRICE_COLUMN,  # noqa: E402
                        EntsoeClient, load_csv, write_panel_csv)
from qra.log import configure, get_logger  # noqa: E402
from qra.pointmodel import (FeatureSpec, PointModel,  # noqa: E402
                            write_forecasts_csv)
from qra.transform import TransformSpec  # noqa: E402
from qra.variants import VARIANT_NAMES, variant_spec  # noqa: E402

logger = get_logger("qra_framework.run_experiment")

DATE_TIME = datetime.now().strftime("%Y-%m-%d_%H-%M-%S")
SYNTHETIC_DAYS_DEFAULT = 400


def load_panel(config, outdir):
    """Builds the market-local panel the config asks for."""
    data = config.data
    source = data.get("source", "csv")
    if source == "synthetic":
        return synthetic.price_panel(days=data.get("days", SYNTHETIC_DAYS_DEFAULT),
                                     seed=data.get("seed", synthetic.SEED_DEFAULT))
    if source == "csv":
        if "path" not in data:
            raise ConfigError("data.path: required when data.source is csv")
        return load_csv(data["path"], market_tz=config.market_tz)

    token = resolve_token()
    if not token:
        raise AuthError("data.source is entsoe but ENTSOE_TOKEN is not set")
    client = EntsoeClient(token,
                          cache_dir=data.get("cache_dir"),
                          market_tz=config.market_tz,
                          missing_points=data.get("missing_points",
                                                  MISSING_POINTS_DEFAULT))
    panel = client.fetch_panel(parse_day(data["start"]), parse_day(data["end"]),
                               data["domain"], with_load=data.get("with_load", True))
    write_panel_csv(panel, os.path.join(outdir, "panel.csv"))
    return panel.localize(config.market_tz)


def point_forecasts(config, panel, jobs):
    """Runs every configured point forecaster; returns forecasts and metrics."""
    features = FeatureSpec(config.lags, config.exogenous,
                           config.features.get("include_intercept", True))
    transforms = tuple(TransformSpec.from_config(t) for t in config.transforms)
    days = sorted(set(panel.index.normalize()))
    first = config.point.get("first_prediction_day")
    if first is None:
        first = days[max(config.point_windows) + features.max_lag].date()
    last = config.point.get("last_prediction_day", days[-1].date())

    model = PointModel(features, transforms, tuple(config.point.get("models", ("ols",))),
                       config.point_windows, config.point.get("per_hour", True), jobs,
                       progress=True)
    forecasts = model.forecast(panel, parse_day(first), parse_day(last))
    return forecasts, model.summary(panel, forecasts)


def link_latest(exp_path):
    """Points data/latest at the newest experiment folder."""
    symlink_path = os.path.join(ROOT_DIR, "data", "latest")
    try:
        if os.path.islink(symlink_path) or os.path.exists(symlink_path):
            os.remove(symlink_path)
        os.symlink(exp_path, symlink_path, target_is_directory=True)
    except OSError as e:
        logger.warning(f"could not create symlink to latest experiment folder: {e}")


def run(config_path, exp_name=None, jobs=None):
    """
    Runs one experiment.

    Parameters:
        config_path (str): JSON run configuration.
        exp_name (str): Output folder name; timestamped if None.
        jobs (int): Worker processes, used when the config leaves jobs at 1.

    Returns:
        str: The experiment folder.
    """
    config = load_config(config_path)
    jobs = config.jobs if config.jobs > 1 else (jobs or 1)
    exp_path = os.path.join(ROOT_DIR, "data", exp_name or DATE_TIME)
    Path(exp_path).mkdir(parents=True, exist_ok=True)
    link_latest(exp_path)

    logger.info(f"Experiment folder: {exp_path}")
    panel = load_panel(config, exp_path)
    forecasts, summary = point_forecasts(config, panel, jobs)
    print(summary.to_string(float_format="{:.4f}".format))
    summary.to_csv(os.path.join(exp_path, "point_metrics.csv"))
    actual = panel.column(PRICE_COLUMN)
    write_forecasts_csv(forecasts, os.path.join(exp_path, "points.csv"), actual)

    bt = config.backtest
    quantiles = bt.get("quantiles")
    grid = QuantileGrid.from_percentiles(quantiles) if quantiles else QuantileGrid()
    names = VARIANT_NAMES if "ALL" in config.variants else config.variants
    cfgs = [BacktestConfig(config.window,
                           variant_spec(name, **bt.get("params", {})),
                           grid,
                           config.alphas,
                           bt.get("crossing_repair", True),
                           bt.get("significance", 0.05),
                           bt.get("skip_failed", False))
            for name in names]
    reports = compare_variants(forecasts, actual.values.reindex(forecasts.timestamps),
                               cfgs, jobs=jobs, progress=True)
    print(comparison_table(reports).to_string(float_format="{:.4f}".format))
    write_report(reports, exp_path, extra_config=config.to_dict())
    return exp_path


def main():
    parser = argparse.ArgumentParser(
        description="Run a full QRA experiment from a JSON run configuration.")
    parser.add_argument("--config",
                        type=str,
                        default=os.path.join(ROOT_DIR, "configs", "synthetic.json"),
                        help="Path to the run configuration")
    parser.add_argument("--exp_name",
                        type=str,
                        default=None,
                        help="Optional experiment folder name (otherwise timestamped)")
    parser.add_argument("--jobs",
                        type=int,
                        default=None,
                        help="Worker processes when the config does not set them")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args()

    configure(verbose=args.verbose)
    try:
        exp_path = run(args.config, args.exp_name, args.jobs)
    except (QraError, FileNotFoundError) as exc:
        logger.error(str(exc))
        sys.exit(1)
    logger.info(f"Done: {exp_path}")


if __name__ == "__main__":
    main()
