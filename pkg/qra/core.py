"""
Foundational domain types shared by every other module: hourly series, the point
forecast matrix X, quantile grids and forecast surfaces, plus the pinball loss.

All types are frozen dataclasses holding read-only arrays, so they can be passed
between threads and processes without copying defensively.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import date

import numpy as np
import pandas as pd

from qra.errors import GapError, ValidationError

HOURS_PER_DAY = 24
DEFAULT_PERCENTILES = tuple(range(1, 100))
LEVEL_TOLERANCE = 1e-9
DATETIME_COLUMN = "datetime"


def validate_finite(values, what="values"):
    """
    Raises ValidationError if any entry is NaN or infinite.

    Parameters:
        values (array-like): Numbers to check.
        what (str): Name used in the error message.

    Returns:
        np.ndarray: The input as a float64 array.
    """
    arr = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise ValidationError(f"{what} contain {bad} non-finite entries")
    return arr


def _frozen(arr):
    arr = np.array(arr, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


def quantile_level(k):
    """
    Validates a quantile level.

    Parameters:
        k (float): Candidate level.

    Returns:
        float: k, if 0 < k < 1.
    """
    k = float(k)
    if not 0.0 < k < 1.0:
        raise ValidationError(f"quantile level must lie in (0, 1), got {k}")
    return k


@dataclass(frozen=True)
class MarketTimestamp:
    """One hourly slot: its absolute instant plus the market day and hour labels."""

    utc_instant: pd.Timestamp
    market_day: date
    market_hour: int

    def __post_init__(self):
        if not 0 <= self.market_hour < HOURS_PER_DAY:
            raise ValidationError(
                f"market_hour must be in 0..23, got {self.market_hour}")

    @classmethod
    def from_local(cls, local, market_tz):
        """
        Builds a timestamp from a market-local wall-clock label.

        The spring-forward hour does not exist in local time; it is mapped to the
        following instant. The autumn duplicate maps to its first (summer) instant.

        Parameters:
            local (pd.Timestamp): Naive market-local label.
            market_tz (str): IANA zone, e.g. "Europe/Berlin".

        Returns:
            MarketTimestamp
        """
        local = pd.Timestamp(local)
        aware = local.tz_localize(market_tz,
                                  ambiguous=True,
                                  nonexistent="shift_forward")
        return cls(utc_instant=aware.tz_convert("UTC"),
                   market_day=local.date(),
                   market_hour=local.hour)


@dataclass(frozen=True)
class HourlyTimeSeries:
    """
    Timestamp-indexed hourly values (prices or loads) with a declared unit.

    The index is a DatetimeIndex: UTC-aware for raw provider data, naive
    market-local once DST normalization has run.
    """

    values: pd.Series
    unit: str = ""

    def __post_init__(self):
        series = self.values
        if not isinstance(series, pd.Series):
            series = pd.Series(series)
        if not isinstance(series.index, pd.DatetimeIndex):
            raise ValidationError("HourlyTimeSeries needs a DatetimeIndex")
        validate_finite(series.to_numpy(), f"series '{series.name}'")
        if not series.index.is_monotonic_increasing or series.index.has_duplicates:
            raise ValidationError(
                f"series '{series.name}' timestamps must be strictly increasing")
        series = series.astype(float).copy()
        series.index.name = DATETIME_COLUMN
        object.__setattr__(self, "values", series)

    def __len__(self):
        return len(self.values)

    @property
    def name(self):
        return self.values.name

    @property
    def index(self):
        return self.values.index

    def to_numpy(self):
        return self.values.to_numpy(dtype=float)

    def missing_timestamps(self, whole_days=True):
        """
        Returns hourly labels absent from the series.

        Parameters:
            whole_days (bool): Check from the first day's 00:00 to the last day's
                23:00 (market-local labels). False checks only between the first
                and last entry (UTC provider data).
        """
        if len(self.values) == 0:
            return pd.DatetimeIndex([])
        idx = self.values.index
        if whole_days:
            start = idx[0].floor("D")
            end = idx[-1].floor("D") + pd.Timedelta(hours=HOURS_PER_DAY - 1)
        else:
            start, end = idx[0], idx[-1]
        full = pd.date_range(start, end, freq="h")
        return full.difference(idx)

    def require_gap_free(self, whole_days=True):
        """
        Checks the series has no hourly holes (by default: exactly 24 entries for
        each day it touches).

        Returns:
            HourlyTimeSeries: self, for chaining.
        """
        missing = self.missing_timestamps(whole_days)
        if len(missing):
            raise GapError(missing)
        return self

    def days(self):
        """Returns the distinct market days in order."""
        return sorted(set(self.values.index.date))

    def timestamps(self, market_tz):
        """Returns MarketTimestamp objects for a naive market-local index."""
        return [MarketTimestamp.from_local(ts, market_tz) for ts in self.index]


@dataclass(frozen=True)
class QuantileGrid:
    """Strictly increasing quantile levels in (0, 1)."""

    levels: tuple = field(default_factory=lambda: tuple(
        p / 100 for p in DEFAULT_PERCENTILES))

    def __post_init__(self):
        levels = tuple(quantile_level(k) for k in self.levels)
        if not levels:
            raise ValidationError("quantile grid is empty")
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValidationError("quantile grid must be strictly increasing")
        object.__setattr__(self, "levels", levels)

    @classmethod
    def from_percentiles(cls, percents):
        """Builds a grid from percents, e.g. [25, 50, 75]."""
        return cls(tuple(float(p) / 100 for p in sorted(percents)))

    def __len__(self):
        return len(self.levels)

    def __iter__(self):
        return iter(self.levels)

    def index_of(self, level):
        """
        Position of a level on the grid.

        Returns:
            int or None: None when the level is absent.
        """
        for i, k in enumerate(self.levels):
            if abs(k - level) <= LEVEL_TOLERANCE:
                return i
        return None

    def labels(self):
        """Column headers: q01..q99 for whole percents, q2.5 style otherwise."""
        out = []
        for k in self.levels:
            pct = round(k * 100, 9)
            if float(pct).is_integer():
                out.append(f"q{int(pct):02d}")
            else:
                out.append(f"q{pct:g}")
        return out


@dataclass(frozen=True)
class PointForecastMatrix:
    """The regressor matrix X: one row per hour, one column per forecaster."""

    timestamps: pd.DatetimeIndex
    forecaster_names: tuple
    values: np.ndarray

    def __post_init__(self):
        values = validate_finite(self.values, "point forecasts")
        if values.ndim == 1:
            values = values.reshape(-1, 1)
        names = tuple(str(n) for n in self.forecaster_names)
        timestamps = pd.DatetimeIndex(self.timestamps)
        if values.shape[0] < 1 or values.shape[1] < 1:
            raise ValidationError("point forecast matrix must be at least 1x1")
        if values.shape != (len(timestamps), len(names)):
            raise ValidationError(
                f"values shape {values.shape} does not match "
                f"{len(timestamps)} timestamps x {len(names)} forecasters")
        if not timestamps.is_monotonic_increasing or timestamps.has_duplicates:
            raise ValidationError("point forecast rows must be in time order")
        object.__setattr__(self, "timestamps", timestamps)
        object.__setattr__(self, "forecaster_names", names)
        object.__setattr__(self, "values", _frozen(values))

    @property
    def shape(self):
        return self.values.shape

    @classmethod
    def from_frame(cls, frame):
        """Builds the matrix from a DataFrame indexed by time."""
        return cls(frame.index, tuple(frame.columns), frame.to_numpy(dtype=float))

    def to_frame(self):
        frame = pd.DataFrame(self.values,
                             index=self.timestamps,
                             columns=list(self.forecaster_names))
        frame.index.name = DATETIME_COLUMN
        return frame

    def take(self, rows):
        """Returns the sub-matrix for a slice or boolean mask of rows."""
        return PointForecastMatrix(self.timestamps[rows], self.forecaster_names,
                                   self.values[rows])

    def select(self, names):
        """Returns the sub-matrix with the named columns, in the given order."""
        cols = [self.forecaster_names.index(n) for n in names]
        return PointForecastMatrix(self.timestamps, tuple(names),
                                   self.values[:, cols])


@dataclass(frozen=True)
class QuantileForecastSurface:
    """Predicted quantiles: one row per timestamp, one column per grid level."""

    timestamps: pd.DatetimeIndex
    grid: QuantileGrid
    values: np.ndarray

    def __post_init__(self):
        values = validate_finite(self.values, "quantile forecasts")
        timestamps = pd.DatetimeIndex(self.timestamps)
        if values.ndim != 2 or values.shape != (len(timestamps), len(self.grid)):
            raise ValidationError(
                f"surface shape {values.shape} does not match "
                f"{len(timestamps)} timestamps x {len(self.grid)} levels")
        object.__setattr__(self, "timestamps", timestamps)
        object.__setattr__(self, "values", _frozen(values))

    def column(self, level):
        """Returns the forecast column for one level (None if absent)."""
        i = self.grid.index_of(level)
        return None if i is None else self.values[:, i]

    def is_monotone(self):
        return bool(np.all(np.diff(self.values, axis=1) >= 0))

    def to_frame(self):
        frame = pd.DataFrame(self.values,
                             index=self.timestamps,
                             columns=self.grid.labels())
        frame.index.name = DATETIME_COLUMN
        return frame

    @classmethod
    def from_frame(cls, frame):
        """Inverse of to_frame: columns must be q-labels."""
        percents = []
        for col in frame.columns:
            if not str(col).startswith("q"):
                raise ValidationError(f"unexpected surface column '{col}'")
            percents.append(float(str(col)[1:]))
        return cls(frame.index, QuantileGrid.from_percentiles(percents),
                   frame.to_numpy(dtype=float))

    @classmethod
    def concat(cls, surfaces):
        """Stacks day-wise surfaces sharing one grid."""
        surfaces = list(surfaces)
        if not surfaces:
            raise ValidationError("nothing to concatenate")
        grid = surfaces[0].grid
        if any(s.grid != grid for s in surfaces):
            raise ValidationError("surfaces use different grids")
        timestamps = surfaces[0].timestamps.append(
            [s.timestamps for s in surfaces[1:]])
        return cls(timestamps, grid, np.vstack([s.values for s in surfaces]))


def pinball_loss(k, residual):
    """
    Pinball (check) loss rho_k(u) = u * (k - 1{u < 0}).

    Parameters:
        k (float): Quantile level in (0, 1).
        residual (float or array-like): u = actual - forecast.

    Returns:
        float or np.ndarray: Non-negative loss, same shape as residual.
    """
    k = quantile_level(k)
    u = np.asarray(residual, dtype=float)
    loss = np.where(u >= 0, k * u, (k - 1.0) * u)
    if loss.ndim == 0:
        return float(loss)
    return loss


def repair_crossing(surface):
    """
    Monotone rearrangement: sorts each row of the surface ascending.

    Parameters:
        surface (QuantileForecastSurface): Possibly crossing quantiles.

    Returns:
        QuantileForecastSurface: Same timestamps and grid, rows non-decreasing.
    """
    return QuantileForecastSurface(surface.timestamps, surface.grid,
                                   np.sort(surface.values, axis=1))
