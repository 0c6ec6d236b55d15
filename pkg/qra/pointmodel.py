"""
Point forecasts with a rolling calibration window.

For every prediction day d the model is refitted on the `window_days` days ending
at d-1 (one regression per hour by default), then predicts the 24 hours of d. The
oldest day drops out of the window and d joins it before d+1 is predicted.

Features per (day, hour): prices at the configured day lags for the same hour,
exogenous columns (the load forecast for the day itself, which is known before the
auction) and an optional intercept. Prices and exogenous columns pass through a
scaler + VST fitted on the window; predictions are mapped back to EUR/MWh.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import linalg
from tqdm import tqdm

from qra.core import DATETIME_COLUMN, HOURS_PER_DAY, HourlyTimeSeries, PointForecastMatrix
from qra.errors import (AlignmentError, CoverageError, ParseError, RankDeficient,
                        ValidationError)
from qra.ingest import LOAD_COLUMN, PRICE_COLUMN
from qra.log import get_logger
from qra.transform import TransformSpec

logger = get_logger(__name__)

LAGS_DEFAULT = (1, 2, 7)
EXOGENOUS_DEFAULT = (LOAD_COLUMN,)
WINDOW_DAYS_DEFAULT = 182
MODEL_KINDS = ("ols", "naive")
LOGISTIC_EPS = 1e-9


@dataclass(frozen=True)
class FeatureSpec:
    """Which regressors feed the point model."""

    lags: tuple = LAGS_DEFAULT
    exogenous: tuple = EXOGENOUS_DEFAULT
    include_intercept: bool = True

    def __post_init__(self):
        lags = tuple(sorted({int(lag) for lag in self.lags}))
        if not lags:
            raise ValidationError("at least one price lag is required")
        if lags[0] < 1:
            raise ValidationError(f"lags must be >= 1, got {lags}")
        object.__setattr__(self, "lags", lags)
        object.__setattr__(self, "exogenous", tuple(self.exogenous))

    @property
    def max_lag(self):
        return self.lags[-1]

    @property
    def feature_count(self):
        return len(self.lags) + len(self.exogenous) + int(self.include_intercept)


@dataclass(frozen=True)
class CalibrationSchedule:
    """Window length and the span of days to predict."""

    window_days: int
    first_prediction_day: date
    last_prediction_day: date
    per_hour: bool = True

    def __post_init__(self):
        if int(self.window_days) < 1:
            raise ValidationError(f"window_days must be positive, got {self.window_days}")
        first = pd.Timestamp(self.first_prediction_day).date()
        last = pd.Timestamp(self.last_prediction_day).date()
        if last < first:
            raise ValidationError(f"empty prediction span {first}..{last}")
        object.__setattr__(self, "window_days", int(self.window_days))
        object.__setattr__(self, "first_prediction_day", first)
        object.__setattr__(self, "last_prediction_day", last)

    def check(self, feature_spec):
        if self.window_days < feature_spec.max_lag + 1:
            raise ValidationError(
                f"window_days {self.window_days} must be at least max lag + 1 "
                f"({feature_spec.max_lag + 1})")
        return self

    def prediction_days(self):
        return list(pd.date_range(self.first_prediction_day,
                                  self.last_prediction_day, freq="D").date)


@dataclass(frozen=True)
class PointMetricsReport:
    """Accuracy of one forecaster over the prediction span."""

    mae: float
    mse: float
    rmse: float
    mape: float = None
    r2: float = None
    window_days: int = None

    def to_dict(self):
        return {"mae": self.mae, "mse": self.mse, "rmse": self.rmse,
                "mape": self.mape, "r2": self.r2, "window_days": self.window_days}


def fit_ols(X, y, include_intercept=False):
    """
    Least squares through a column-pivoted QR decomposition.

    Parameters:
        X (array-like): n x p design matrix.
        y (array-like): n responses.
        include_intercept (bool): Prepend a column of ones.

    Returns:
        np.ndarray: Coefficients, the intercept first when included.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    y = np.asarray(y, dtype=float)
    if include_intercept:
        X = np.column_stack([np.ones(X.shape[0]), X])
    n, p = X.shape
    if y.shape != (n,):
        raise ValidationError(f"y has shape {y.shape}, expected ({n},)")
    if n < p:
        raise RankDeficient(f"{n} rows cannot identify {p} coefficients")

    Q, R, perm = linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = max(n, p) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    rank = int(np.sum(diag > tol))
    if rank < p:
        raise RankDeficient(f"design matrix has rank {rank} < {p} columns")
    beta = np.empty(p)
    beta[perm] = linalg.solve_triangular(R, Q.T @ y)
    return beta


def _predict(beta, x, include_intercept):
    if include_intercept:
        return beta[0] + x @ beta[1:]
    return x @ beta


def _invert(pipeline, y):
    if pipeline.vst.kind == "logistic":
        y = np.clip(y, LOGISTIC_EPS, 1.0 - LOGISTIC_EPS)
    return np.asarray(pipeline.inverse_transform(y), dtype=float)


def _forecast_day(task):
    """
    Predicts one day from its calibration history.

    The task holds only rows up to day d-1 for prices and up to day d for
    exogenous columns, so day d's prices are out of reach.

    Parameters:
        task (tuple): (prices, exogenous, lags, transform, model, per_hour,
            include_intercept). prices is (max_lag + W) x 24 ending at d-1,
            exogenous a list of (max_lag + W + 1) x 24 arrays ending at d.

    Returns:
        np.ndarray: The 24 predicted prices.
    """
    prices, exogenous, lags, transform, model, per_hour, include_intercept = task
    if model == "naive":
        return prices[-1].copy()

    max_lag = lags[-1]
    window = prices.shape[0] - max_lag
    if np.ptp(prices[max_lag:]) == 0:
        # nothing to scale or regress on a flat window
        return prices[-1].copy()
    pipeline = None
    if transform is not None:
        pipeline = transform.fit(prices[max_lag:].ravel())
        prices = np.asarray(pipeline.transform(prices.ravel())).reshape(prices.shape)

    train = [prices[max_lag - lag:max_lag - lag + window] for lag in lags]
    ahead = [prices[prices.shape[0] - lag] for lag in lags]
    for column in exogenous:
        if transform is not None:
            column_pipeline = transform.fit(column[max_lag:-1].ravel())
            column = np.asarray(column_pipeline.transform(column.ravel())).reshape(
                column.shape)
        train.append(column[max_lag:-1])
        ahead.append(column[-1])
    targets = prices[max_lag:]

    if per_hour:
        predicted = np.empty(HOURS_PER_DAY)
        for h in range(HOURS_PER_DAY):
            if np.ptp(targets[:, h]) == 0:
                predicted[h] = targets[0, h]
                continue
            X = np.column_stack([f[:, h] for f in train])
            beta = fit_ols(X, targets[:, h], include_intercept)
            predicted[h] = _predict(beta, np.array([f[h] for f in ahead]),
                                    include_intercept)
    else:
        X = np.column_stack([f.ravel() for f in train])
        beta = fit_ols(X, targets.ravel(), include_intercept)
        predicted = _predict(beta, np.column_stack(ahead), include_intercept)

    if pipeline is None:
        return predicted
    return _invert(pipeline, predicted)


def _day_matrix(series):
    """Reshapes a gap-free market-local series into days x 24."""
    series = series.require_gap_free()
    return series.days(), series.to_numpy().reshape(-1, HOURS_PER_DAY)


def rolling_point_forecast(panel,
                           feature_spec=FeatureSpec(),
                           schedule=None,
                           transform=TransformSpec(),
                           model="ols",
                           label=None,
                           jobs=1,
                           progress=False):
    """
    Rolls a point model over the prediction span.

    Parameters:
        panel (MarketPanel): Market-local panel, 24 rows per day.
        feature_spec (FeatureSpec): Regressors.
        schedule (CalibrationSchedule): Window and prediction span.
        transform (TransformSpec): Scaler + VST fitted per window; None leaves
            prices untouched.
        model (str): "ols" or "naive" (persistence, P_hat(d, h) = P(d-1, h)).
        label (str): Output column name; defaults to "<model>_w<window>".
        jobs (int): Worker processes. Results do not depend on it.
        progress (bool): Show a tqdm bar.

    Returns:
        PointForecastMatrix: One column, 24 rows per prediction day.
    """
    if schedule is None:
        raise ValidationError("a CalibrationSchedule is required")
    if model not in MODEL_KINDS:
        raise ValidationError(f"unknown point model '{model}'")
    schedule.check(feature_spec)

    days, prices = _day_matrix(panel.column(PRICE_COLUMN))
    exogenous = []
    if model != "naive":
        exogenous = [_day_matrix(panel.column(name))[1] for name in feature_spec.exogenous]
    day_pos = {day: i for i, day in enumerate(days)}
    window, max_lag = schedule.window_days, feature_spec.max_lag

    tasks = []
    for day in schedule.prediction_days():
        if day not in day_pos:
            raise CoverageError(f"prediction day {day} is not in the panel")
        i = day_pos[day]
        start = i - window - max_lag
        if start < 0:
            raise CoverageError(
                f"day {day} needs {window + max_lag} days of history, "
                f"panel holds {i}")
        tasks.append((prices[start:i],
                      [column[start:i + 1] for column in exogenous],
                      feature_spec.lags,
                      None if model == "naive" else transform,
                      model,
                      schedule.per_hour,
                      feature_spec.include_intercept))

    label = label or f"{model}_w{window}"
    logger.info(f"Point model {label}: {len(tasks)} days, "
                f"{'per-hour' if schedule.per_hour else 'pooled'}")
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as executor:
            rows = list(tqdm(executor.map(_forecast_day, tasks), total=len(tasks),
                             desc=label, disable=not progress))
    else:
        rows = [_forecast_day(t) for t in tqdm(tasks, desc=label, disable=not progress)]

    first, last = schedule.first_prediction_day, schedule.last_prediction_day
    index = panel.index[(panel.index.normalize() >= pd.Timestamp(first))
                        & (panel.index.normalize() <= pd.Timestamp(last))]
    return PointForecastMatrix(index, (label,), np.concatenate(rows).reshape(-1, 1))


def point_metrics(actual, predicted, window_days=None):
    """
    Point accuracy over whole days.

    MAE, RMSE and MAPE are averaged over 24 * N_d hours. MAPE is None when any
    actual price is 0. R^2 compares against the mean of the actuals over the
    span; it is None for a constant actual series unless the fit is exact.

    Parameters:
        actual (HourlyTimeSeries): Observed prices.
        predicted (HourlyTimeSeries): Forecasts on the same index.
        window_days (int): Carried into the report.

    Returns:
        PointMetricsReport
    """
    a, p = actual.values, predicted.values
    if not a.index.equals(p.index):
        if a.index.sort_values().equals(p.index.sort_values()):
            p = p.reindex(a.index)
        else:
            raise AlignmentError("actual and predicted indices differ")
    if len(a) == 0 or len(a) % HOURS_PER_DAY:
        raise AlignmentError(f"{len(a)} rows is not a whole number of days")

    a, p = a.to_numpy(dtype=float), p.to_numpy(dtype=float)
    err = a - p
    mae = float(np.mean(np.abs(err)))
    mse = float(np.mean(err**2))
    mape = None if np.any(a == 0) else float(np.mean(np.abs(err / a)))
    sse = float(np.sum(err**2))
    sst = float(np.sum((a - a.mean())**2))
    if sst > 0:
        r2 = 1.0 - sse / sst
    else:
        r2 = 1.0 if sse == 0 else None
    return PointMetricsReport(mae=mae, mse=mse, rmse=float(np.sqrt(mse)),
                              mape=mape, r2=r2, window_days=window_days)


@dataclass
class PointModel:
    """
    A bank of point forecasters: every (model, transform, window) combination
    becomes one column of the forecast matrix X.
    """

    feature_spec: FeatureSpec = field(default_factory=FeatureSpec)
    transforms: tuple = (TransformSpec(),)
    models: tuple = ("ols",)
    window_days: tuple = (WINDOW_DAYS_DEFAULT,)
    per_hour: bool = True
    jobs: int = 1
    progress: bool = False

    def __post_init__(self):
        unknown = [m for m in self.models if m not in MODEL_KINDS]
        if not self.models or unknown:
            raise ValidationError(f"unknown point models {unknown}")
        if not self.window_days:
            raise ValidationError("at least one window length is required")
        self._windows = {}

    def _configs(self):
        for model in self.models:
            if model == "naive":
                yield model, None, min(self.window_days), "naive"
                continue
            for transform in self.transforms:
                for window in self.window_days:
                    vst = "" if transform.vst_kind == "none" else f"_{transform.vst_kind}"
                    yield model, transform, window, f"{model}{vst}_w{window}"

    def forecast(self, panel, first_prediction_day, last_prediction_day):
        """
        Runs every configured forecaster over the prediction span.

        Returns:
            PointForecastMatrix: One column per configuration.
        """
        columns, names = [], []
        for model, transform, window, label in self._configs():
            schedule = CalibrationSchedule(window, first_prediction_day,
                                           last_prediction_day, self.per_hour)
            matrix = rolling_point_forecast(panel, self.feature_spec, schedule,
                                            transform, model, label, self.jobs,
                                            self.progress)
            columns.append(matrix.values[:, 0])
            names.append(label)
            self._windows[label] = window if model != "naive" else None
        return PointForecastMatrix(matrix.timestamps, tuple(names),
                                   np.column_stack(columns))

    def summary(self, panel, forecasts):
        """
        Accuracy table: one row per forecaster with MAE, MSE, RMSE, MAPE, R^2.

        MAPE is printed both as a ratio and in percent.
        """
        actual = panel.column(PRICE_COLUMN).values.reindex(forecasts.timestamps)
        if actual.isna().any():
            raise AlignmentError("forecast timestamps are not all in the panel")
        actual = HourlyTimeSeries(actual)
        rows = []
        for i, name in enumerate(forecasts.forecaster_names):
            predicted = HourlyTimeSeries(pd.Series(forecasts.values[:, i],
                                                   index=forecasts.timestamps))
            report = point_metrics(actual, predicted, self._windows.get(name))
            row = {"forecaster": name, **report.to_dict()}
            row["mape_pct"] = None if report.mape is None else 100 * report.mape
            rows.append(row)
        return pd.DataFrame(rows).set_index("forecaster")


def write_forecasts_csv(forecasts, path, actual=None):
    """
    Writes point forecasts as CSV: `datetime` plus one column per forecaster, and
    the actual prices as `price_da` when given.

    Parameters:
        forecasts (PointForecastMatrix): Forecasts to write.
        path (str or Path): Target file.
        actual (HourlyTimeSeries or pd.Series): Observed prices on the same rows.
    """
    frame = forecasts.to_frame()
    if actual is not None:
        values = actual.values if isinstance(actual, HourlyTimeSeries) else actual
        values = values.reindex(forecasts.timestamps)
        if values.isna().any():
            raise AlignmentError("actual prices do not cover every forecast row")
        frame[PRICE_COLUMN] = values.to_numpy(dtype=float)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path)
    logger.info(f"Wrote {frame.shape[0]} forecast rows to {path}")
    return path


def read_forecasts_csv(path, target=PRICE_COLUMN):
    """
    Reads a CSV written by write_forecasts_csv.

    Returns:
        tuple: (PointForecastMatrix of every non-target column, pd.Series of the
            target column or None when absent).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Forecast file not found: {path}")
    frame = pd.read_csv(path)
    if DATETIME_COLUMN not in frame.columns:
        raise ParseError(f"{path.name}: header lacks a '{DATETIME_COLUMN}' column")
    index = pd.to_datetime(frame.pop(DATETIME_COLUMN), errors="coerce")
    if index.isna().any():
        row = int(np.flatnonzero(index.isna().to_numpy())[0]) + 1
        raise ParseError(f"{path.name}: unparseable datetime", row=row)
    frame.index = pd.DatetimeIndex(index, name=DATETIME_COLUMN)
    actual = frame.pop(target).astype(float) if target in frame.columns else None
    if frame.shape[1] == 0:
        raise ParseError(f"{path.name}: no forecaster columns")
    bad = [c for c in frame.columns if not pd.api.types.is_numeric_dtype(frame[c])]
    if bad:
        raise ParseError(f"{path.name}: non-numeric forecaster columns {bad}")
    return PointForecastMatrix.from_frame(frame), actual
