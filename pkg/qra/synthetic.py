"""
Fixed-seed synthetic datasets for demos and tests.

`linear_gaussian` gives point forecasts X and prices y = x + eps with standard
normal noise, so the true conditional quantiles are known. `price_panel` gives a
market-local hourly panel with daily and weekly price shapes and a load forecast
that drives prices, for running the full pipeline without network access.
"""

import numpy as np
import pandas as pd

from qra.core import DATETIME_COLUMN, HOURS_PER_DAY, HourlyTimeSeries, PointForecastMatrix
from qra.ingest import LOAD_COLUMN, PRICE_COLUMN, MarketPanel

SEED_DEFAULT = 2016
START_DEFAULT = "2016-01-01"
DEMO_WINDOW_DEFAULT = 60
DEMO_PREDICTION_DAYS_DEFAULT = 120


def _hourly_index(start, days):
    index = pd.date_range(start, periods=days * HOURS_PER_DAY, freq="h")
    index.name = DATETIME_COLUMN
    return index


def _price_shape(index):
    hour = index.hour.to_numpy()
    weekday = index.dayofweek.to_numpy()
    daily = 8 * np.sin((hour - 6) * np.pi / 12) + 5 * np.sin((hour - 3) * np.pi / 6)
    weekend = np.where(weekday >= 5, -7.0, 0.0)
    return daily + weekend


def linear_gaussian(days=DEMO_WINDOW_DEFAULT + DEMO_PREDICTION_DAYS_DEFAULT,
                    forecasters=1,
                    seed=SEED_DEFAULT,
                    start=START_DEFAULT,
                    spread=0.5,
                    noise=1.0):
    """
    Point forecasts and prices with y_t = x_t + eps_t, eps_t ~ Normal(0, noise^2).

    The first forecaster is x_t itself; further forecasters add independent
    Normal(0, spread^2) errors to it.

    Parameters:
        days (int): Whole days to generate.
        forecasters (int): Columns of X.
        seed (int): Generator seed.
        start (str): First day.

    Returns:
        tuple: (PointForecastMatrix, pd.Series of prices).
    """
    rng = np.random.default_rng(seed)
    index = _hourly_index(start, days)
    level = 40 + np.cumsum(rng.normal(0, 0.3, len(index)))
    x = level + _price_shape(index)
    columns = [x] + [x + rng.normal(0, spread, len(index)) for _ in range(forecasters - 1)]
    y = x + rng.normal(0, noise, len(index))
    names = tuple(f"f{j + 1}" for j in range(forecasters))
    matrix = PointForecastMatrix(index, names, np.column_stack(columns))
    return matrix, pd.Series(y, index=index, name=PRICE_COLUMN)


def price_panel(days=400, seed=SEED_DEFAULT, start=START_DEFAULT):
    """
    Market-local hourly panel of prices (EUR/MWh) and a load forecast (MWh).

    Prices follow load with AR(1) day-to-day noise and occasional spikes.

    Returns:
        MarketPanel
    """
    rng = np.random.default_rng(seed)
    index = _hourly_index(start, days)
    hour = index.hour.to_numpy()
    weekday = index.dayofweek.to_numpy()
    season = np.cos(2 * np.pi * index.dayofyear.to_numpy() / 365.25)

    load = (55000 + 6000 * season + 9000 * np.sin((hour - 7) * np.pi / 14).clip(0)
            - np.where(weekday >= 5, 8000, 0) + rng.normal(0, 800, len(index)))
    shock = np.zeros(len(index))
    innovations = rng.normal(0, 3.0, len(index))
    for t in range(HOURS_PER_DAY, len(index)):
        shock[t] = 0.6 * shock[t - HOURS_PER_DAY] + innovations[t]
    spikes = rng.binomial(1, 0.005, len(index)) * rng.exponential(40, len(index))
    price = 5 + 0.0006 * load + shock + spikes

    return MarketPanel(HourlyTimeSeries(pd.Series(price, index=index, name=PRICE_COLUMN),
                                        "EUR/MWh"),
                       HourlyTimeSeries(pd.Series(load, index=index, name=LOAD_COLUMN),
                                        "MWh"))
