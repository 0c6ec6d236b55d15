"""
Rolling-window backtests of QRA variants.

Each prediction day d is forecast by a variant fitted on the `calibration_window_days`
days of point forecasts and prices ending at d-1; the window then shifts by one
day. The day-d fit never receives day-d prices. Day surfaces are concatenated in
day order and scored against the actual prices.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd
from tqdm import tqdm

from qra.core import (DATETIME_COLUMN, HOURS_PER_DAY, HourlyTimeSeries,
                      QuantileForecastSurface, QuantileGrid)
from qra.errors import (AlignmentError, CoverageError, MissingLevel, NotConverged,
                        QraError, SpanMismatch, ValidationError)
from qra.evaluate import (ALPHAS_DEFAULT, SIGNIFICANCE_DEFAULT, aec, aps, build_interval,
                          christoffersen_test, interval_levels, interval_width,
                          kupiec_test, metrics_row)
from qra.log import get_logger
from qra.pointmodel import point_metrics
from qra.variants import (VARIANT_CLASSES, VariantSpec, fit_variant, predict_variant,
                          variant_spec)

logger = get_logger(__name__)

CALIBRATION_WINDOW_DEFAULT = 72
MEDIAN_LEVEL = 0.5


@dataclass(frozen=True)
class BacktestConfig:
    """
    Attributes:
        calibration_window_days (int): Days per calibration window.
        variant (VariantSpec): Variant and hyper-parameters.
        grid (QuantileGrid): Levels to forecast.
        alphas (tuple): Nominal interval coverages in percent.
        crossing_repair (bool): Sort predicted rows; overrides variant.repair.
        significance (float): Size of the coverage tests.
        skip_failed (bool): Log and skip days whose fit fails instead of aborting.
        label (str): Name in comparison tables; defaults to the variant name.
    """

    calibration_window_days: int = CALIBRATION_WINDOW_DEFAULT
    variant: VariantSpec = field(default_factory=VariantSpec)
    grid: QuantileGrid = field(default_factory=QuantileGrid)
    alphas: tuple = ALPHAS_DEFAULT
    crossing_repair: bool = True
    significance: float = SIGNIFICANCE_DEFAULT
    skip_failed: bool = False
    label: str = None

    def __post_init__(self):
        if int(self.calibration_window_days) < 2:
            raise ValidationError(
                f"calibration window must be >= 2 days, got {self.calibration_window_days}")
        object.__setattr__(self, "calibration_window_days",
                           int(self.calibration_window_days))
        alphas = tuple(float(a) for a in self.alphas)
        for alpha in alphas:
            for level in interval_levels(alpha):
                if self.grid.index_of(level) is None:
                    raise MissingLevel(f"alpha={alpha:g} needs level {level:g} on the grid")
        object.__setattr__(self, "alphas", alphas)
        if not 0 < self.significance < 1:
            raise ValidationError(f"significance must lie in (0, 1), got {self.significance}")

    @property
    def name(self):
        return self.label or self.variant.name

    def to_dict(self):
        return {
            "label": self.name,
            "calibration_window_days": self.calibration_window_days,
            "variant": self.variant.to_dict(),
            "levels": list(self.grid.levels),
            "alphas": list(self.alphas),
            "crossing_repair": self.crossing_repair,
            "significance": self.significance,
            "skip_failed": self.skip_failed,
        }


@dataclass(frozen=True)
class BacktestReport:
    """
    Results of one backtest: the forecast surface, coverage and tests per alpha,
    the aggregate pinball score and provenance.
    """

    config: BacktestConfig
    surface: QuantileForecastSurface
    actual: pd.Series
    coverage: dict
    kupiec: dict
    christoffersen: dict
    aps_value: float
    provenance: dict
    median_metrics: object = None

    def aec(self, alpha):
        return self.coverage[float(alpha)].aec

    def kupiec_test(self, alpha, significance_level=None):
        if significance_level is None:
            return self.kupiec[float(alpha)]
        return kupiec_test(self.coverage[float(alpha)].hits, alpha, significance_level)

    def christoffersen_test(self, alpha, significance_level=None):
        if significance_level is None:
            return self.christoffersen[float(alpha)]
        return christoffersen_test(self.coverage[float(alpha)].hits, alpha,
                                   significance_level)

    def aps(self):
        return self.aps_value

    @property
    def prediction_days(self):
        return sorted(set(self.surface.timestamps.normalize()))

    def metrics_frame(self):
        """One row per alpha, in the metrics.csv layout."""
        rows = []
        for alpha in self.config.alphas:
            kupiec, chris = self.kupiec[alpha], self.christoffersen[alpha]
            rows.append(metrics_row(self.config.name, alpha, self.coverage[alpha],
                                    interval_width(build_interval(self.surface, alpha)),
                                    kupiec, chris))
        return pd.DataFrame(rows)


def _digest(*arrays):
    h = hashlib.sha256()
    for arr in arrays:
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def _aligned_prices(X, y):
    if isinstance(y, HourlyTimeSeries):
        y = y.values
    if isinstance(y, pd.Series):
        if not y.index.equals(X.timestamps):
            raise AlignmentError("point forecasts and prices have different timestamps")
        return y.astype(float)
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.shape[0] != X.shape[0]:
        raise AlignmentError(f"{X.shape[0]} forecast rows vs {y.shape[0]} prices")
    return pd.Series(y, index=X.timestamps)


def _check_whole_days(timestamps):
    days = timestamps.normalize()
    counts = pd.Series(1, index=days).groupby(level=0).size()
    partial = counts[counts != HOURS_PER_DAY]
    if len(partial):
        raise AlignmentError(f"{len(partial)} partial days, first {partial.index[0].date()}")
    return counts.index


def _backtest_day(task):
    """Fits on one window and predicts the next day. Top-level for process pools."""
    spec, grid, X_train, y_train, X_pred, timestamps, day = task
    fitted = fit_variant(spec, X_train, y_train, grid, day=day)
    return predict_variant(fitted, X_pred, timestamps).values


def run_backtest(X, y, cfg=BacktestConfig(), first_prediction_day=None, jobs=1,
                 progress=False):
    """
    Slides the calibration window over the point forecasts one day at a time.

    Parameters:
        X (PointForecastMatrix): Point forecasts, whole days only.
        y (HourlyTimeSeries, pd.Series or array-like): Actual prices on X's rows.
        cfg (BacktestConfig): Variant, window and evaluation settings.
        first_prediction_day (date): Start later than the first possible day
            (used to align spans across configs).
        jobs (int): Worker processes; results do not depend on it.
        progress (bool): Show a tqdm bar.

    Returns:
        BacktestReport
    """
    y = _aligned_prices(X, y)
    days = _check_whole_days(X.timestamps)
    window = cfg.calibration_window_days
    if len(days) < window + 1:
        raise CoverageError(f"{len(days)} days of forecasts cannot fill a {window}-day "
                            f"window plus one prediction day")
    start = window
    if first_prediction_day is not None:
        start = int(days.searchsorted(pd.Timestamp(first_prediction_day)))
        if start < window:
            raise CoverageError(f"{first_prediction_day} leaves less than {window} days "
                                f"of calibration history")
        if start >= len(days):
            raise CoverageError(f"{first_prediction_day} is past the last forecast day")

    spec = replace(cfg.variant, repair=cfg.crossing_repair)
    values, prices = X.values, y.to_numpy()
    tasks = []
    for i in range(start, len(days)):
        train = slice((i - window) * HOURS_PER_DAY, i * HOURS_PER_DAY)
        pred = slice(i * HOURS_PER_DAY, (i + 1) * HOURS_PER_DAY)
        tasks.append((spec, cfg.grid, values[train], prices[train], values[pred],
                      X.timestamps[pred], days[i].date()))

    logger.info(f"Backtest {cfg.name}: window {window} days, {len(tasks)} prediction days")
    results, failed = [], []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as executor:
            futures = [executor.submit(_backtest_day, t) for t in tasks]
            outcomes = [_outcome(f.result, t[-1]) for f, t in
                        zip(tqdm(futures, desc=cfg.name, disable=not progress), tasks)]
    else:
        outcomes = [_outcome(lambda t=t: _backtest_day(t), t[-1])
                    for t in tqdm(tasks, desc=cfg.name, disable=not progress)]
    for (day_values, error), task in zip(outcomes, tasks):
        if error is None:
            results.append((task[5], day_values))
            continue
        if not cfg.skip_failed:
            raise error
        logger.warning(f"Skipping {task[-1]}: {error}")
        failed.append(str(task[-1]))
    if not results:
        raise CoverageError("every prediction day failed")

    timestamps = results[0][0].append([ts for ts, _ in results[1:]])
    surface = QuantileForecastSurface(timestamps, cfg.grid,
                                      np.vstack([v for _, v in results]))
    actual = y.loc[timestamps]

    coverage, kupiec, christoffersen = {}, {}, {}
    for alpha in cfg.alphas:
        coverage[alpha] = aec(build_interval(surface, alpha), actual)
        kupiec[alpha] = kupiec_test(coverage[alpha].hits, alpha, cfg.significance)
        christoffersen[alpha] = christoffersen_test(coverage[alpha].hits, alpha,
                                                    cfg.significance)
        if kupiec[alpha].degenerate:
            logger.warning(f"{cfg.name} alpha={alpha:g}: constant hit sequence, "
                           f"coverage tests are degenerate")

    median = None
    if cfg.grid.index_of(MEDIAN_LEVEL) is not None:
        median = point_metrics(HourlyTimeSeries(actual),
                               HourlyTimeSeries(pd.Series(surface.column(MEDIAN_LEVEL),
                                                          index=timestamps)),
                               window)
    provenance = {
        "config": cfg.to_dict(),
        "inputs": {
            "forecasters": list(X.forecaster_names),
            "X_sha256": _digest(X.values, X.timestamps.asi8),
            "y_sha256": _digest(y.to_numpy(), X.timestamps.asi8),
        },
        "first_prediction_day": str(days[start].date()),
        "last_prediction_day": str(days[-1].date()),
        "models_fitted": len(tasks) - len(failed),
        "failed_days": failed,
        "crossing_repair": cfg.crossing_repair,
    }
    return BacktestReport(cfg, surface, actual, coverage, kupiec, christoffersen,
                          aps(surface, actual), provenance, median)


def _outcome(call, day):
    try:
        return call(), None
    except NotConverged as exc:
        return None, exc.annotate(day=day)
    except QraError as exc:
        return None, exc


def compare_variants(X, y, cfgs, jobs=1, progress=False):
    """
    Backtests several configs over one common prediction span.

    The span starts where the longest calibration window first fits.

    Returns:
        dict: label -> BacktestReport, in config order.
    """
    cfgs = list(cfgs)
    if not cfgs:
        raise ValidationError("nothing to compare")
    days = _check_whole_days(X.timestamps)
    longest = max(cfg.calibration_window_days for cfg in cfgs)
    if len(days) <= longest:
        raise CoverageError(f"{len(days)} days cannot fill a {longest}-day window")
    first_day = days[longest].date()

    reports, seen = {}, {}
    for cfg in cfgs:
        label = cfg.name
        seen[label] = seen.get(label, 0) + 1
        if seen[label] > 1:
            label = f"{label}#{seen[label]}"
            cfg = replace(cfg, label=label)
        reports[label] = run_backtest(X, y, cfg, first_day, jobs, progress)

    spans = {label: r.surface.timestamps for label, r in reports.items()}
    reference = next(iter(spans.values()))
    mismatched = [label for label, ts in spans.items() if not ts.equals(reference)]
    if mismatched:
        raise SpanMismatch(f"reports {mismatched} cover a different span "
                           f"(failed days were skipped)")
    return reports


def comparison_table(reports):
    """AEC per (variant, alpha) plus APS: the coverage table layout."""
    rows = {}
    for label, report in reports.items():
        row = {f"aec_{alpha:g}": report.aec(alpha) for alpha in report.config.alphas}
        row["aps"] = report.aps()
        rows[label] = row
    table = pd.DataFrame.from_dict(rows, orient="index")
    table.index.name = "variant"
    return table


def tune(X, y, base_cfg, param_grid, jobs=1):
    """
    Grid search over variant hyper-parameters, ranked by APS.

    Parameters:
        X (PointForecastMatrix): Point forecasts.
        y: Actual prices.
        base_cfg (BacktestConfig): Everything but the searched parameters.
        param_grid (dict): e.g. {"lambda_l1": [0.01, 0.1, 1.0]} or {"h": [...]},
            {"factor_count": [1, 2]}.

    Returns:
        pd.DataFrame: One row per combination, best (lowest APS) first.
    """
    keys = sorted(param_grid)
    base = base_cfg.variant.to_dict()
    rows = []
    for combo in itertools.product(*(param_grid[k] for k in keys)):
        params = dict(zip(keys, combo))
        spec = variant_spec(**{**base, **params})
        cfg = replace(base_cfg, variant=spec)
        try:
            report = run_backtest(X, y, cfg, jobs=jobs)
        except QraError as exc:
            logger.warning(f"{spec.name} {params} failed: {exc}")
            rows.append({**params, "aps": np.nan})
            continue
        logger.info(f"{spec.name} {params}: APS {report.aps():.4f}")
        rows.append({**params, "aps": report.aps()})
    return pd.DataFrame(rows).sort_values("aps", kind="mergesort",
                                          na_position="last").reset_index(drop=True)


class QrTester:
    """
    Backtester object: holds a calibration window and a variant, runs on (X, y).

    Parameters:
        calibration_window (int): Days per calibration window.
        qr_model (QRA or str): A variant instance (e.g. QRA(quantiles=...)) or name.
        alphas (tuple): Nominal coverages in percent.
        skip_failed (bool): Skip days whose fit fails.
        jobs (int): Worker processes.
    """

    def __init__(self, calibration_window=CALIBRATION_WINDOW_DEFAULT, qr_model="QRA",
                 alphas=ALPHAS_DEFAULT, skip_failed=False, jobs=1, progress=False):
        if isinstance(qr_model, str):
            qr_model = VARIANT_CLASSES[qr_model]()
        self.model = qr_model
        self.config = BacktestConfig(calibration_window, qr_model.spec, qr_model.grid,
                                     alphas, qr_model.spec.repair,
                                     skip_failed=skip_failed)
        self.jobs = jobs
        self.progress = progress
        self.report = None

    def fit_predict(self, X, y):
        self.report = run_backtest(X, y, self.config, jobs=self.jobs,
                                   progress=self.progress)
        return self.report


def _bundle(reports):
    if isinstance(reports, BacktestReport):
        return {reports.config.name: reports}
    return dict(reports)


def write_report(reports, outdir, extra_config=None):
    """
    Writes a report bundle: metrics.csv, aps.csv, one surface CSV per variant
    (surface.csv when there is only one) and config.json.

    Output is deterministic: no wall-clock data, keys sorted.

    Parameters:
        reports (BacktestReport or dict): One report or label -> report.
        outdir (str or Path): Target directory, created if needed.
        extra_config (dict): Effective run configuration to echo.

    Returns:
        Path: The output directory.
    """
    reports = _bundle(reports)
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)

    metrics = pd.concat([r.metrics_frame() for r in reports.values()], ignore_index=True)
    metrics.to_csv(outdir / "metrics.csv", index=False)
    aps_rows = []
    for label, report in reports.items():
        row = {"variant": label, "aps": report.aps()}
        if report.median_metrics is not None:
            row.update({f"median_{k}": v for k, v in report.median_metrics.to_dict().items()
                        if k != "window_days"})
        aps_rows.append(row)
    pd.DataFrame(aps_rows).to_csv(outdir / "aps.csv", index=False)

    for label, report in reports.items():
        name = "surface.csv" if len(reports) == 1 else f"surface_{label}.csv"
        frame = report.surface.to_frame()
        frame.index.name = DATETIME_COLUMN
        frame.to_csv(outdir / name)

    echo = {"run": extra_config or {},
            "reports": {label: r.provenance for label, r in reports.items()}}
    (outdir / "config.json").write_text(json.dumps(echo, indent=2, sort_keys=True,
                                                   default=str), encoding="utf-8")
    logger.info(f"Report written to {outdir}")
    return outdir
