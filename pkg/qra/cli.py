"""
Command-line frontend for the end-to-end flow: fetch -> point -> backtest -> evaluate.

Example usage:
python -m qra fetch --domain 10Y1001A1001A63L --start 2015-01-01 --end 2017-01-01
python -m qra point --input panel.csv --windows 182 364 728 --out points.csv
python -m qra backtest --input points.csv --variant QRA --window 72 --alphas 50,70,90
python -m qra backtest --seeded-demo --variant ALL
python -m qra evaluate --surface qra_output/surface.csv --actuals points.csv

Machine-readable results only go to files; summary tables go to stdout and log
records to stderr. Exit codes: 2 auth, 3 network, 4 invalid input or config,
5 solver non-convergence, 6 insufficient coverage or misaligned inputs.

With --config, values from the JSON run configuration override command-line flags,
which override the defaults.
"""

import argparse
import sys

import pandas as pd

from qra import synthetic
from qra.backtest import (BacktestConfig, compare_variants, comparison_table,
                          run_backtest, tune, write_report)
from qra.config import load_config, merge, parse_day, resolve_token
from qra.core import DATETIME_COLUMN, QuantileForecastSurface, QuantileGrid
from qra.errors import (AlignmentError, AuthError, BadInterval, CoverageError,
                        NetworkError, NotConverged, QraError, RateLimited,
                        SpanMismatch, ValidationError)
from qra.evaluate import ALPHAS_DEFAULT, SIGNIFICANCE_DEFAULT, aps, evaluate_surface
from qra.ingest import (DOMAIN_DEFAULT, MARKET_TZ_DEFAULT, MISSING_POINTS_DEFAULT,
                        MISSING_POINTS_MODES, PRICE_COLUMN, EntsoeClient, load_csv,
                        write_panel_csv)
from qra.log import configure, get_logger
from qra.pointmodel import (EXOGENOUS_DEFAULT, LAGS_DEFAULT, MODEL_KINDS,
                            WINDOW_DAYS_DEFAULT, FeatureSpec, PointModel,
                            read_forecasts_csv, write_forecasts_csv)
from qra.qrsolve import L1_LAMBDA_GRID
from qra.transform import SCALER_KINDS, VST_KINDS, TransformSpec, transform_panel
from qra.variants import VARIANT_NAMES, variant_spec

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_AUTH = 2
EXIT_NETWORK = 3
EXIT_INVALID = 4
EXIT_NOT_CONVERGED = 5
EXIT_COVERAGE = 6

# first match wins; subclasses before their bases
_EXIT_CODES = (
    (AuthError, EXIT_AUTH),
    ((NetworkError, RateLimited), EXIT_NETWORK),
    (NotConverged, EXIT_NOT_CONVERGED),
    ((CoverageError, AlignmentError, SpanMismatch), EXIT_COVERAGE),
    ((ValidationError, BadInterval, FileNotFoundError), EXIT_INVALID),
)

WINDOW_DEFAULT = 72
LAMBDA_L1_DEFAULT = 1.0
OUTPUT_DEFAULT = "qra_output"
DEMO_PERCENTILES = tuple(range(5, 100, 5))
DEMO_FORECASTERS = 3
DEMO_PANEL_DAYS = 250
DEMO_POINT_WINDOW = 56
DEMO_QRA_WINDOW = 28
DEMO_VARIANTS = ("QRA", "QRM", "SQRA", "SQRM")


def exit_code_for(exc):
    """Maps an exception to the documented exit code."""
    for classes, code in _EXIT_CODES:
        if isinstance(exc, classes):
            return code
    return EXIT_FAILURE


def _percent_list(text):
    try:
        values = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated percents, got '{text}'")
    if not values or any(not 0 < v < 100 for v in values):
        raise argparse.ArgumentTypeError(f"percents must lie in (0, 100): '{text}'")
    return values


def _print_table(frame, float_format="{:.4f}".format):
    print(frame.to_string(float_format=float_format))


def _read_actuals(path, timestamps, market_tz, target=PRICE_COLUMN):
    """
    Actual prices on the given rows, from either a panel CSV (UTC instants, DST
    normalized on load) or a forecast CSV carrying a target column.
    """
    head = pd.read_csv(path, nrows=1)
    if DATETIME_COLUMN not in head.columns or target not in head.columns:
        raise ValidationError(f"{path}: needs '{DATETIME_COLUMN}' and '{target}' columns")
    stamp = pd.Timestamp(head[DATETIME_COLUMN].iloc[0])
    if stamp.tzinfo is not None:
        series = load_csv(path, market_tz=market_tz).column(PRICE_COLUMN).values
    else:
        frame = pd.read_csv(path, index_col=DATETIME_COLUMN, parse_dates=True)
        series = frame[target].astype(float)
    aligned = series.reindex(pd.DatetimeIndex(timestamps))
    if aligned.isna().any():
        raise AlignmentError(f"{path}: {int(aligned.isna().sum())} forecast rows have "
                             f"no actual price")
    return aligned


def cmd_fetch(args):
    """Downloads prices (and the load forecast) and writes a UTC panel CSV."""
    config = load_config(args.config) if args.config else None
    data = config.data if config else {}
    opts = merge(data, vars(args), {
        "domain": DOMAIN_DEFAULT,
        "start": None,
        "end": None,
        "market_tz": MARKET_TZ_DEFAULT,
        "cache_dir": None,
        "missing_points": MISSING_POINTS_DEFAULT,
    })
    with_load = data.get("with_load", not args.no_load)
    token = resolve_token(args.token)
    if not token:
        raise AuthError("no ENTSO-E security token: pass --token or set ENTSOE_TOKEN")
    if opts["start"] is None or opts["end"] is None:
        raise ValidationError("--start and --end are required")

    client = EntsoeClient(token,
                          cache_dir=opts["cache_dir"],
                          market_tz=opts["market_tz"],
                          missing_points=opts["missing_points"])
    panel = client.fetch_panel(parse_day(opts["start"]), parse_day(opts["end"]),
                               opts["domain"], with_load=with_load)
    write_panel_csv(panel, args.out)
    print(f"{len(panel)} hourly rows ({', '.join(panel.columns)}) "
          f"from {panel.index[0]} to {panel.index[-1]} -> {args.out}")
    return EXIT_OK


def _point_defaults(config):
    if config is None:
        return {}
    out = {
        "input": config.data.get("path"),
        "market_tz": config.data.get("market_tz"),
        "windows": config.point.get("windows"),
        "models": config.point.get("models"),
        "per_hour": config.point.get("per_hour"),
        "first": config.point.get("first_prediction_day"),
        "last": config.point.get("last_prediction_day"),
        "lags": config.features.get("lags"),
        "exogenous": config.features.get("exogenous"),
        "include_intercept": config.features.get("include_intercept"),
        "jobs": config.jobs,
    }
    return out


def cmd_point(args):
    """Rolling-window point forecasts plus the per-forecaster metrics table."""
    config = load_config(args.config) if args.config else None
    opts = merge(_point_defaults(config), vars(args), {
        "input": None,
        "market_tz": MARKET_TZ_DEFAULT,
        "windows": (WINDOW_DAYS_DEFAULT,),
        "models": ("ols",),
        "per_hour": True,
        "first": None,
        "last": None,
        "lags": LAGS_DEFAULT,
        "exogenous": EXOGENOUS_DEFAULT,
        "include_intercept": True,
        "jobs": 1,
    })
    if opts["input"] is None:
        raise ValidationError("--input panel CSV is required")
    if config is not None:
        transforms = tuple(TransformSpec.from_config(t) for t in config.transforms)
    else:
        transforms = tuple(TransformSpec(vst_kind=kind, scaler_kind=args.scaler)
                           for kind in (args.vst or ("none",)))

    panel = load_csv(opts["input"], market_tz=opts["market_tz"])
    features = FeatureSpec(opts["lags"], opts["exogenous"], opts["include_intercept"])
    days = sorted(set(panel.index.normalize()))
    first_index = max(opts["windows"]) + features.max_lag
    if opts["first"] is None and first_index >= len(days):
        raise CoverageError(f"panel holds {len(days)} days, the longest window needs "
                            f"{first_index} days of history")
    first = parse_day(opts["first"]) if opts["first"] else days[first_index].date()
    last = parse_day(opts["last"]) if opts["last"] else days[-1].date()

    model = PointModel(features, transforms, tuple(opts["models"]),
                       tuple(opts["windows"]), opts["per_hour"], opts["jobs"],
                       progress=not args.quiet)
    forecasts = model.forecast(panel, first, last)
    summary = model.summary(panel, forecasts)
    _print_table(summary)

    write_forecasts_csv(forecasts, args.out, panel.column(PRICE_COLUMN))
    metrics_path = args.metrics or f"{str(args.out).rsplit('.', 1)[0]}_metrics.csv"
    summary.to_csv(metrics_path)
    logger.info(f"Metrics written to {metrics_path}")
    return EXIT_OK


def _backtest_defaults(config):
    if config is None:
        return {}
    bt = config.backtest
    return {
        "input": config.data.get("path") if config.data.get("source") != "synthetic"
        else None,
        "market_tz": config.data.get("market_tz"),
        "window": bt.get("window"),
        "variant": bt.get("variants"),
        "alphas": bt.get("alphas"),
        "quantiles": bt.get("quantiles"),
        "significance": bt.get("significance"),
        "skip_failed": bt.get("skip_failed"),
        "crossing_repair": bt.get("crossing_repair"),
        "jobs": config.jobs,
        "out": config.output,
        **{key: bt.get("params", {}).get(key) for key in
           ("lambda_l1", "h", "factor_count", "row_std", "include_intercept")},
    }


def _variant_names(names):
    names = tuple(names)
    if "ALL" in names:
        return VARIANT_NAMES
    return names


def _backtest_inputs(args, opts):
    if args.seeded_demo:
        days = opts["window"] + synthetic.DEMO_PREDICTION_DAYS_DEFAULT
        logger.info(f"Seeded demo: {days} synthetic days, seed {args.seed}")
        return synthetic.linear_gaussian(days=days, forecasters=DEMO_FORECASTERS,
                                         seed=args.seed)
    if opts["input"] is None:
        raise ValidationError("--input forecast CSV or --seeded-demo is required")
    X, target = read_forecasts_csv(opts["input"])
    if args.actuals:
        return X, _read_actuals(args.actuals, X.timestamps, opts["market_tz"])
    if target is None:
        raise ValidationError(f"{opts['input']} has no '{PRICE_COLUMN}' column; "
                              f"pass --actuals")
    return X, target


def cmd_backtest(args):
    """Rolling QRA backtest of one or several variants; writes a report bundle."""
    config = load_config(args.config) if args.config else None
    opts = merge(_backtest_defaults(config), vars(args), {
        "input": None,
        "market_tz": MARKET_TZ_DEFAULT,
        "window": WINDOW_DEFAULT,
        "variant": ("QRA",),
        "alphas": ALPHAS_DEFAULT,
        "quantiles": DEMO_PERCENTILES if args.seeded_demo else None,
        "significance": SIGNIFICANCE_DEFAULT,
        "skip_failed": False,
        "crossing_repair": True,
        "jobs": 1,
        "out": OUTPUT_DEFAULT,
        "lambda_l1": LAMBDA_L1_DEFAULT,
        "h": None,
        "factor_count": 1,
        "row_std": "population",
        "include_intercept": True,
    })
    X, y = _backtest_inputs(args, opts)
    grid = (QuantileGrid.from_percentiles(opts["quantiles"]) if opts["quantiles"]
            else QuantileGrid())
    params = {key: opts[key] for key in ("lambda_l1", "h", "factor_count", "row_std",
                                         "include_intercept")}

    cfgs = [BacktestConfig(calibration_window_days=opts["window"],
                           variant=variant_spec(name, **params),
                           grid=grid,
                           alphas=tuple(opts["alphas"]),
                           crossing_repair=opts["crossing_repair"],
                           significance=opts["significance"],
                           skip_failed=opts["skip_failed"])
            for name in _variant_names(opts["variant"])]

    if args.tune:
        return _tune(X, y, cfgs, opts)

    progress = not args.quiet
    if len(cfgs) == 1:
        reports = {cfgs[0].name: run_backtest(X, y, cfgs[0], jobs=opts["jobs"],
                                              progress=progress)}
    else:
        reports = compare_variants(X, y, cfgs, jobs=opts["jobs"], progress=progress)

    _print_table(comparison_table(reports))
    effective = {key: (list(v) if isinstance(v, tuple) else v) for key, v in opts.items()}
    effective["seeded_demo"] = args.seeded_demo
    if args.seeded_demo:
        effective["seed"] = args.seed
    write_report(reports, opts["out"], extra_config=effective)
    return EXIT_OK


def _tune(X, y, cfgs, opts):
    """Grid search per variant over the hyper-parameter that variant exposes."""
    for cfg in cfgs:
        name = cfg.variant.name
        if name == "LQRA":
            grid = {"lambda_l1": list(L1_LAMBDA_GRID)}
        elif name.startswith("S"):
            grid = {"h": [0.05, 0.1, 0.25, 0.5, 1.0, 2.0]}
        elif "F" in name:
            grid = {"factor_count": list(range(1, X.shape[1] + 1))}
        else:
            logger.warning(f"{name} has no tunable hyper-parameter, skipped")
            continue
        table = tune(X, y, cfg, grid, jobs=opts["jobs"])
        print(f"{name}:")
        _print_table(table)
    return EXIT_OK


def cmd_evaluate(args):
    """Coverage, tests and APS of an existing surface CSV."""
    frame = pd.read_csv(args.surface, index_col=DATETIME_COLUMN, parse_dates=True)
    surface = QuantileForecastSurface.from_frame(frame)
    actual = _read_actuals(args.actuals, surface.timestamps, args.market_tz, args.target)
    table = evaluate_surface(surface, actual, args.alphas, args.significance,
                             variant=args.label)
    _print_table(table.drop(columns="variant"))
    print(f"APS: {aps(surface, actual):.4f}")
    if args.out:
        table.to_csv(args.out, index=False)
        logger.info(f"Metrics written to {args.out}")
    return EXIT_OK


def cmd_transform(args):
    """Side-by-side VSTs of the price series, as a plot-ready CSV."""
    panel = load_csv(args.input, market_tz=args.market_tz)
    frame = transform_panel(panel.column(PRICE_COLUMN).values,
                            args.kinds or VST_KINDS[1:], args.scaler)
    frame.index.name = DATETIME_COLUMN
    frame.to_csv(args.out)
    _print_table(frame.describe().T[["mean", "std", "min", "max"]])
    return EXIT_OK


def cmd_demo(args):
    """
    Runs the whole flow on a synthetic panel: point forecasts from several
    transforms and models, then a QRA variant comparison on them.
    """
    panel = synthetic.price_panel(days=args.days, seed=args.seed)
    features = FeatureSpec()
    days = sorted(set(panel.index.normalize()))
    first = days[DEMO_POINT_WINDOW + features.max_lag].date()
    model = PointModel(features,
                       (TransformSpec("none"), TransformSpec("arcsinh")),
                       ("ols", "naive"),
                       (DEMO_POINT_WINDOW,),
                       jobs=args.jobs,
                       progress=not args.quiet)
    forecasts = model.forecast(panel, first, days[-1].date())
    print("Point forecasts:")
    _print_table(model.summary(panel, forecasts))

    actual = panel.column(PRICE_COLUMN).values.reindex(forecasts.timestamps)
    grid = QuantileGrid.from_percentiles(DEMO_PERCENTILES)
    cfgs = [BacktestConfig(DEMO_QRA_WINDOW, variant_spec(name), grid, ALPHAS_DEFAULT)
            for name in DEMO_VARIANTS]
    reports = compare_variants(forecasts, actual, cfgs, jobs=args.jobs,
                               progress=not args.quiet)
    print("Probabilistic forecasts:")
    _print_table(comparison_table(reports))
    write_forecasts_csv(forecasts, f"{args.out}/points.csv", actual)
    write_report(reports, args.out, extra_config={"demo": True, "seed": args.seed,
                                                  "days": args.days})
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="qra",
        description="Quantile Regression Averaging for electricity price forecasting.")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    parser.add_argument("--quiet", action="store_true",
                        help="Only warnings and errors, no progress bars")
    sub = parser.add_subparsers(dest="command", required=True)

    fetch = sub.add_parser("fetch", help="Download prices and load from ENTSO-E")
    fetch.add_argument("--token", help="Security token (default: $ENTSOE_TOKEN)")
    fetch.add_argument("--domain", help=f"EIC bidding zone (default {DOMAIN_DEFAULT})")
    fetch.add_argument("--start", help="First day, YYYY-MM-DD")
    fetch.add_argument("--end", help="Day after the last, YYYY-MM-DD")
    fetch.add_argument("--market_tz", "--market-tz",
                       help=f"Market zone (default {MARKET_TZ_DEFAULT})")
    fetch.add_argument("--cache_dir", "--cache-dir", help="On-disk response cache")
    fetch.add_argument("--missing_points", "--missing-points", choices=MISSING_POINTS_MODES,
                       help="Curve points absent from a period: error or interpolate")
    fetch.add_argument("--no_load", "--no-load", action="store_true", help="Prices only")
    fetch.add_argument("--out", default="panel.csv", help="Output CSV")
    fetch.add_argument("--config", help="JSON run configuration")
    fetch.set_defaults(func=cmd_fetch)

    point = sub.add_parser("point", help="Rolling-window point forecasts")
    point.add_argument("--input", help="Panel CSV (datetime UTC, price_da, quantity)")
    point.add_argument("--windows", type=int, nargs="+",
                       help=f"Calibration windows in days (default {WINDOW_DAYS_DEFAULT})")
    point.add_argument("--models", nargs="+", choices=MODEL_KINDS, help="Point models")
    point.add_argument("--vst", nargs="+", choices=VST_KINDS,
                       help="Variance stabilizing transforms, one forecaster each")
    point.add_argument("--scaler", choices=SCALER_KINDS, help="Scaler before the VST")
    point.add_argument("--lags", type=int, nargs="+", help="Price lags in days")
    point.add_argument("--exogenous", nargs="*", help="Exogenous panel columns")
    point.add_argument("--pooled", dest="per_hour", action="store_false", default=None,
                       help="One regression over all hours instead of one per hour")
    point.add_argument("--first", help="First prediction day")
    point.add_argument("--last", help="Last prediction day")
    point.add_argument("--market_tz", "--market-tz",
                       help=f"Market zone (default {MARKET_TZ_DEFAULT})")
    point.add_argument("--jobs", type=int, help="Worker processes")
    point.add_argument("--out", default="points.csv", help="Forecast CSV")
    point.add_argument("--metrics", help="Metrics CSV (default <out>_metrics.csv)")
    point.add_argument("--config", help="JSON run configuration")
    point.set_defaults(func=cmd_point, include_intercept=None)

    backtest = sub.add_parser("backtest", help="Rolling QRA backtest")
    backtest.add_argument("--input", help="Forecast CSV from `qra point`")
    backtest.add_argument("--actuals", help="Panel or forecast CSV with actual prices")
    backtest.add_argument("--variant", nargs="+", choices=VARIANT_NAMES + ("ALL",),
                          help="Variants to run (default QRA)")
    backtest.add_argument("--window", type=int,
                          help=f"Calibration window in days (default {WINDOW_DEFAULT})")
    backtest.add_argument("--alphas", type=_percent_list,
                          help="Nominal coverages, e.g. 50,70,90")
    backtest.add_argument("--quantiles", type=_percent_list,
                          help="Quantile grid in percents (default 1..99)")
    backtest.add_argument("--significance", type=float, help="Test size (default 0.05)")
    backtest.add_argument("--lambda_l1", "--lambda-l1", type=float,
                          help=f"LQRA penalty (default {LAMBDA_L1_DEFAULT})")
    backtest.add_argument("--h", type=float,
                          help="Smoothing bandwidth (default rule of thumb)")
    backtest.add_argument("--factor_count", "--factor-count", type=int,
                          help="Principal components (F-variants)")
    backtest.add_argument("--row_std", "--row-std", choices=("population", "sample"),
                          help="Row standardization convention (sF-variants)")
    backtest.add_argument("--no_repair", "--no-repair", dest="crossing_repair",
                          action="store_false", default=None,
                          help="Keep crossing quantiles")
    backtest.add_argument("--skip_failed", "--skip-failed", action="store_true", default=None,
                          help="Skip days whose fit fails instead of aborting")
    backtest.add_argument("--tune", action="store_true",
                          help="Grid-search each variant's hyper-parameter by APS")
    backtest.add_argument("--seeded_demo", "--seeded-demo", action="store_true",
                          help="Use the bundled synthetic dataset")
    backtest.add_argument("--seed", type=int, default=synthetic.SEED_DEFAULT,
                          help="Seed of --seeded_demo")
    backtest.add_argument("--market_tz", "--market-tz",
                          help=f"Market zone (default {MARKET_TZ_DEFAULT})")
    backtest.add_argument("--jobs", type=int, help="Worker processes")
    backtest.add_argument("--out", help=f"Report directory (default {OUTPUT_DEFAULT})")
    backtest.add_argument("--config", help="JSON run configuration")
    backtest.set_defaults(func=cmd_backtest, include_intercept=None)

    evaluate = sub.add_parser("evaluate", help="Metrics of an existing surface CSV")
    evaluate.add_argument("--surface", required=True, help="Surface CSV (datetime, q01..)")
    evaluate.add_argument("--actuals", required=True,
                          help="Panel or forecast CSV with actual prices")
    evaluate.add_argument("--target", default=PRICE_COLUMN, help="Actual price column")
    evaluate.add_argument("--alphas", type=_percent_list, default=ALPHAS_DEFAULT,
                          help="Nominal coverages, e.g. 50,70,90")
    evaluate.add_argument("--significance", type=float, default=SIGNIFICANCE_DEFAULT)
    evaluate.add_argument("--label", help="Variant name for the table")
    evaluate.add_argument("--market_tz", "--market-tz", default=MARKET_TZ_DEFAULT)
    evaluate.add_argument("--out", help="Metrics CSV")
    evaluate.set_defaults(func=cmd_evaluate)

    transform = sub.add_parser("transform", help="Compare VSTs on the price series")
    transform.add_argument("--input", required=True, help="Panel CSV")
    transform.add_argument("--kinds", nargs="+", choices=VST_KINDS, help="VSTs to apply")
    transform.add_argument("--scaler", choices=SCALER_KINDS)
    transform.add_argument("--market_tz", "--market-tz", default=MARKET_TZ_DEFAULT)
    transform.add_argument("--out", default="transformed.csv")
    transform.set_defaults(func=cmd_transform)

    demo = sub.add_parser("demo", help="Full pipeline on a synthetic panel")
    demo.add_argument("--days", type=int, default=DEMO_PANEL_DAYS)
    demo.add_argument("--seed", type=int, default=synthetic.SEED_DEFAULT)
    demo.add_argument("--jobs", type=int, default=1)
    demo.add_argument("--out", default=f"{OUTPUT_DEFAULT}/demo")
    demo.set_defaults(func=cmd_demo)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    configure(verbose=args.verbose, quiet=args.quiet)
    try:
        return args.func(args)
    except (QraError, FileNotFoundError) as exc:
        code = exit_code_for(exc)
        logger.error(str(exc))
        if code == EXIT_AUTH:
            logger.error("Usage: qra fetch --token TOKEN ... (or export ENTSOE_TOKEN)")
        return code


if __name__ == "__main__":
    sys.exit(main())
