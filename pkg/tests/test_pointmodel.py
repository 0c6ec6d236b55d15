from datetime import date, timedelta

import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qra import synthetic
from qra.core import HourlyTimeSeries
from qra.errors import AlignmentError, CoverageError, ParseError, RankDeficient, ValidationError
from qra.ingest import LOAD_COLUMN, PRICE_COLUMN, MarketPanel
from qra.pointmodel import (CalibrationSchedule, FeatureSpec, PointModel, fit_ols,
                            point_metrics, read_forecasts_csv, rolling_point_forecast,
                            write_forecasts_csv)
from qra.transform import TransformSpec

from conftest import matrix


def _series(values, start="2016-01-04", name=PRICE_COLUMN):
    index = pd.date_range(start, periods=len(values), freq="h")
    return HourlyTimeSeries(pd.Series(np.asarray(values, dtype=float), index=index, name=name))


def _panel(prices, load=None):
    return MarketPanel(_series(prices),
                       None if load is None else _series(load, name=LOAD_COLUMN))


@pytest.fixture(scope="module")
def panel():
    return synthetic.price_panel(days=70, seed=9)


def test_metrics_example():
    actual = _series(np.full(48, 10.0))
    predicted = _series(np.tile([9.0, 11.0], 24))
    report = point_metrics(actual, predicted, window_days=7)
    assert report.mae == pytest.approx(1.0)
    assert report.rmse == pytest.approx(1.0)
    assert report.mse == pytest.approx(1.0)
    assert report.mape == pytest.approx(0.1)
    assert report.r2 is None
    assert report.window_days == 7


def test_metrics_mape_undefined_with_zero_price():
    values = np.arange(24.0)
    report = point_metrics(_series(values), _series(values + 1))
    assert report.mape is None
    assert report.mae == pytest.approx(1.0)


def test_metrics_perfect_fit():
    values = np.linspace(10, 60, 24)
    report = point_metrics(_series(values), _series(values))
    assert report.mae == 0.0
    assert report.r2 == 1.0


@given(st.lists(st.floats(min_value=-500, max_value=500), min_size=24, max_size=24),
       st.lists(st.floats(min_value=-500, max_value=500), min_size=24, max_size=24))
def test_rmse_bounds_mae(actual, predicted):
    report = point_metrics(_series(actual), _series(predicted))
    assert report.rmse >= report.mae - 1e-9
    assert report.mse >= 0


def test_metrics_alignment():
    with pytest.raises(AlignmentError):
        point_metrics(_series(np.ones(30)), _series(np.ones(30)))
    with pytest.raises(AlignmentError):
        point_metrics(_series(np.ones(24)), _series(np.ones(24), start="2016-01-05"))


def test_fit_ols_recovers_coefficients():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((50, 2))
    y = 3.0 + X @ np.array([1.5, -2.0])
    np.testing.assert_allclose(fit_ols(X, y, include_intercept=True), [3.0, 1.5, -2.0])


def test_fit_ols_rank_checks():
    x = np.arange(10.0)
    with pytest.raises(RankDeficient):
        fit_ols(np.column_stack([x, 3 * x]), x)
    with pytest.raises(RankDeficient):
        fit_ols(np.ones((2, 3)), np.ones(2))


def test_feature_spec_and_schedule_validation():
    assert FeatureSpec(lags=(7, 1, 1)).lags == (1, 7)
    with pytest.raises(ValidationError):
        FeatureSpec(lags=(0,))
    with pytest.raises(ValidationError):
        CalibrationSchedule(7, date(2016, 2, 1), date(2016, 1, 1))
    with pytest.raises(ValidationError):
        CalibrationSchedule(7, date(2016, 2, 1), date(2016, 2, 1)).check(FeatureSpec())


def test_naive_repeats_previous_day():
    prices = np.arange(24 * 6, dtype=float)
    schedule = CalibrationSchedule(2, date(2016, 1, 8), date(2016, 1, 9))
    forecast = rolling_point_forecast(_panel(prices), FeatureSpec(lags=(1,), exogenous=()),
                                      schedule, model="naive")
    assert forecast.forecaster_names == ("naive_w2",)
    np.testing.assert_array_equal(forecast.values[:, 0], prices[72:120])
    assert forecast.timestamps[0] == pd.Timestamp("2016-01-08")


def test_constant_panel_predicts_constant():
    prices = np.full(24 * 20, 50.0)
    spec = FeatureSpec(lags=(1,), exogenous=(), include_intercept=False)
    schedule = CalibrationSchedule(7, date(2016, 1, 15), date(2016, 1, 23))
    forecast = rolling_point_forecast(_panel(prices), spec, schedule, transform=None)
    np.testing.assert_allclose(forecast.values, 50.0)
    assert forecast.shape == (24 * 9, 1)


def test_ols_reproduces_exact_autoregression():
    days = np.empty((15, 24))
    days[0] = 30.0 + np.arange(24)
    for d in range(1, 15):
        days[d] = 0.8 * days[d - 1] + 5.0
    spec = FeatureSpec(lags=(1,), exogenous=())
    schedule = CalibrationSchedule(10, date(2016, 1, 15), date(2016, 1, 18))
    forecast = rolling_point_forecast(_panel(days.ravel()), spec, schedule, transform=None)
    np.testing.assert_allclose(forecast.values[:, 0], days[11:15].ravel(), rtol=1e-6)


def test_constant_panel_with_default_features_and_transform():
    prices = np.full(24 * 20, 50.0)
    schedule = CalibrationSchedule(7, date(2016, 1, 15), date(2016, 1, 23))
    forecast = rolling_point_forecast(_panel(prices), FeatureSpec(lags=(1,), exogenous=()),
                                      schedule)
    np.testing.assert_allclose(forecast.values, 50.0)
    report = point_metrics(_series(np.full(24 * 9, 50.0), start="2016-01-15"),
                           _series(forecast.values[:, 0], start="2016-01-15"))
    assert report.mae == 0.0


def test_flat_hours_keep_their_level():
    # hour 0 never moves, the rest follow an exact autoregression
    days = np.empty((15, 24))
    days[0] = 30.0 + np.arange(24)
    for d in range(1, 15):
        days[d] = 0.8 * days[d - 1] + 5.0
    days[:, 0] = 42.0
    schedule = CalibrationSchedule(10, date(2016, 1, 15), date(2016, 1, 18))
    forecast = rolling_point_forecast(_panel(days.ravel()), FeatureSpec(lags=(1,), exogenous=()),
                                      schedule, transform=None)
    np.testing.assert_allclose(forecast.values[::24, 0], 42.0)
    np.testing.assert_allclose(forecast.values[:, 0], days[11:15].ravel(), rtol=1e-6)


def _noisy_autoregression(n_days, seed, intercept=10.0, phi=(0.5, 0.3), sigma=1.0):
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, (n_days, 24))
    days = np.full((n_days, 24), intercept / (1.0 - sum(phi)))
    for d in range(7, n_days):
        days[d] = intercept + phi[0] * days[d - 1] + phi[1] * days[d - 7] + noise[d]
    return days, noise


def test_ols_recovers_noisy_autoregression():
    days, noise = _noisy_autoregression(160, seed=21)
    X = np.column_stack([days[29:129].ravel(), days[23:123].ravel()])
    beta = fit_ols(X, days[30:130].ravel(), include_intercept=True)
    np.testing.assert_allclose(beta[1:], (0.5, 0.3), atol=0.05)

    first = date(2016, 1, 4) + timedelta(days=130)
    schedule = CalibrationSchedule(100, first, first + timedelta(days=29), per_hour=False)
    forecast = rolling_point_forecast(_panel(days.ravel()), FeatureSpec(lags=(1, 7), exogenous=()),
                                      schedule, transform=None)
    mae = np.mean(np.abs(forecast.values[:, 0] - days[130:].ravel()))
    noise_floor = np.mean(np.abs(noise[130:]))
    assert mae <= 1.1 * noise_floor


def test_missing_history_raises_coverage_error(panel):
    schedule = CalibrationSchedule(60, date(2016, 1, 20), date(2016, 1, 21))
    with pytest.raises(CoverageError):
        rolling_point_forecast(panel, FeatureSpec(), schedule)
    outside = CalibrationSchedule(14, date(2016, 6, 1), date(2016, 6, 1))
    with pytest.raises(CoverageError):
        rolling_point_forecast(panel, FeatureSpec(), outside)


def test_forecast_ignores_target_day_prices(panel):
    schedule = CalibrationSchedule(21, date(2016, 2, 10), date(2016, 2, 10))
    transform = TransformSpec("arcsinh")
    before = rolling_point_forecast(panel, FeatureSpec(), schedule, transform)

    prices = panel.column(PRICE_COLUMN).values.copy()
    prices[prices.index >= pd.Timestamp("2016-02-10")] *= 3
    shocked = MarketPanel(HourlyTimeSeries(prices), panel.column(LOAD_COLUMN))
    after = rolling_point_forecast(shocked, FeatureSpec(), schedule, transform)
    np.testing.assert_array_equal(before.values, after.values)


def test_worker_count_does_not_change_results(panel):
    schedule = CalibrationSchedule(14, date(2016, 2, 1), date(2016, 2, 4))
    serial = rolling_point_forecast(panel, FeatureSpec(), schedule, jobs=1)
    parallel = rolling_point_forecast(panel, FeatureSpec(), schedule, jobs=2)
    np.testing.assert_array_equal(serial.values, parallel.values)


def test_pooled_model_runs(panel):
    schedule = CalibrationSchedule(14, date(2016, 2, 1), date(2016, 2, 2))
    pooled = CalibrationSchedule(14, date(2016, 2, 1), date(2016, 2, 2), per_hour=False)
    per_hour = rolling_point_forecast(panel, FeatureSpec(), schedule)
    joint = rolling_point_forecast(panel, FeatureSpec(), pooled)
    assert joint.shape == per_hour.shape == (48, 1)
    assert np.all(np.isfinite(joint.values))


def test_point_model_bank_and_summary(panel):
    model = PointModel(transforms=(TransformSpec(), TransformSpec("arcsinh")),
                       models=("ols", "naive"), window_days=(21, 28))
    forecasts = model.forecast(panel, date(2016, 2, 15), date(2016, 2, 21))
    assert forecasts.forecaster_names == ("ols_w21", "ols_w28", "ols_arcsinh_w21",
                                          "ols_arcsinh_w28", "naive")
    assert forecasts.shape == (7 * 24, 5)
    summary = model.summary(panel, forecasts)
    assert list(summary.index) == list(forecasts.forecaster_names)
    assert {"mae", "rmse", "mape", "mape_pct", "r2", "window_days"} <= set(summary.columns)
    assert summary.loc["ols_w28", "window_days"] == 28
    assert (summary["rmse"] >= summary["mae"]).all()


def test_point_model_validation():
    with pytest.raises(ValidationError):
        PointModel(models=("arima",))
    with pytest.raises(ValidationError):
        PointModel(window_days=())


def test_forecasts_csv_round_trip(tmp_path):
    X = matrix(np.arange(48.0).reshape(24, 2), names=("ols_w182", "naive"))
    actual = pd.Series(np.arange(24.0) + 0.5, index=X.timestamps)
    path = write_forecasts_csv(X, tmp_path / "points.csv", actual)
    read, target = read_forecasts_csv(path)
    assert read.forecaster_names == ("ols_w182", "naive")
    np.testing.assert_allclose(read.values, X.values)
    assert read.timestamps.equals(X.timestamps)
    np.testing.assert_allclose(target.to_numpy(), actual.to_numpy())


def test_forecasts_csv_needs_covering_actuals(tmp_path):
    X = matrix(np.ones(24))
    with pytest.raises(AlignmentError):
        write_forecasts_csv(X, tmp_path / "points.csv",
                            pd.Series(np.ones(12), index=X.timestamps[:12]))


def test_read_forecasts_csv_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_forecasts_csv(tmp_path / "absent.csv")

    no_time = tmp_path / "no_time.csv"
    no_time.write_text("when,f1\n2016-01-01 00:00,1.0\n")
    with pytest.raises(ParseError, match="datetime"):
        read_forecasts_csv(no_time)

    bad_row = tmp_path / "bad_row.csv"
    bad_row.write_text("datetime,f1\n2016-01-01 00:00,1.0\nyesterday,2.0\n")
    with pytest.raises(ParseError) as info:
        read_forecasts_csv(bad_row)
    assert info.value.row == 2

    only_target = tmp_path / "only_target.csv"
    only_target.write_text("datetime,price_da\n2016-01-01 00:00,1.0\n")
    with pytest.raises(ParseError, match="no forecaster"):
        read_forecasts_csv(only_target)

    text = tmp_path / "text.csv"
    text.write_text("datetime,f1\n2016-01-01 00:00,high\n")
    with pytest.raises(ParseError, match="non-numeric"):
        read_forecasts_csv(text)
