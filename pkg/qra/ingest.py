"""
Market data acquisition: the ENTSO-E Transparency Platform client, local CSV
loading and the daylight-saving normalization that turns raw UTC data into gap-free
market-local panels with 24 rows per day.

Multiple TimeSeries blocks in one response (e.g. several auction types) are resolved
by resolution preference first, then by document order: the first block that covers
a timestamp wins.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import tempfile
import time
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from datetime import date
from pathlib import Path

import numpy as np
import pandas as pd
import requests

from qra.core import DATETIME_COLUMN, HOURS_PER_DAY, HourlyTimeSeries
from qra.errors import (AuthError, BadInterval, GapError, MalformedDocument,
                        NetworkError, ParseError, RateLimited, ValidationError)
from qra.log import get_logger

logger = get_logger(__name__)

ENTSOE_URL_DEFAULT = "https://web-api.tp.entsoe.eu/api"
MARKET_TZ_DEFAULT = "Europe/Berlin"
DOMAIN_DEFAULT = "10Y1001A1001A63L"
RESOLUTION_PREFERENCE_DEFAULT = 60
MAX_RETRIES_DEFAULT = 3
BACKOFF_DEFAULT = 1.0
TIMEOUT_DEFAULT = 60
MISSING_POINTS_DEFAULT = "error"
MISSING_POINTS_MODES = ("error", "interpolate")

PRICE_COLUMN = "price_da"
LOAD_COLUMN = "quantity"

DOCUMENT_KINDS = {
    "day_ahead_prices": {"value_tag": "price.amount", "column": PRICE_COLUMN,
                         "unit": "EUR/MWh"},
    "forecast_load": {"value_tag": "quantity", "column": LOAD_COLUMN,
                      "unit": "MWh"},
}

_RESOLUTION_FORMAT = re.compile(r"^PT(\d+)([MH])$")
_RESOLUTION_MINUTES = {"M": 1, "H": 60}
_API_TIME_FORMAT = "%Y%m%d%H%M"


@dataclass(frozen=True)
class EntsoeRequest:
    """One query against the Transparency Platform."""

    security_token: str
    domain_code: str = DOMAIN_DEFAULT
    period_start: date = None
    period_end: date = None
    document_kind: str = "day_ahead_prices"
    resolution_preference: int = RESOLUTION_PREFERENCE_DEFAULT

    def __post_init__(self):
        if not self.security_token:
            raise AuthError("ENTSO-E security token is empty")
        if not self.domain_code:
            raise ValidationError("domain_code must be a non-empty EIC code")
        if self.document_kind not in DOCUMENT_KINDS:
            raise ValidationError(
                f"document_kind must be one of {sorted(DOCUMENT_KINDS)}, "
                f"got '{self.document_kind}'")
        if self.period_start is None or self.period_end is None:
            raise ValidationError("period_start and period_end are required")
        start = pd.Timestamp(self.period_start).date()
        end = pd.Timestamp(self.period_end).date()
        if not start < end:
            raise ValidationError(
                f"period_start {start} must precede period_end {end}")
        if int(self.resolution_preference) <= 0:
            raise ValidationError("resolution_preference must be positive minutes")
        object.__setattr__(self, "period_start", start)
        object.__setattr__(self, "period_end", end)


@dataclass(frozen=True)
class MarketPanel:
    """
    Day-ahead prices with an optional load forecast on the same index.

    When both series are given their indices are inner-joined.
    """

    price_da: HourlyTimeSeries
    load_forecast: HourlyTimeSeries = None

    def __post_init__(self):
        if self.load_forecast is None:
            return
        common = self.price_da.index.intersection(self.load_forecast.index)
        if len(common) == len(self.price_da) == len(self.load_forecast):
            return
        dropped = len(self.price_da) + len(self.load_forecast) - 2 * len(common)
        logger.debug(f"Inner join dropped {dropped} unmatched rows")
        object.__setattr__(self, "price_da", HourlyTimeSeries(
            self.price_da.values.loc[common], self.price_da.unit))
        object.__setattr__(self, "load_forecast", HourlyTimeSeries(
            self.load_forecast.values.loc[common], self.load_forecast.unit))

    def __len__(self):
        return len(self.price_da)

    @property
    def index(self):
        return self.price_da.index

    def column(self, name):
        """
        Returns one column as an HourlyTimeSeries.

        Parameters:
            name (str): "price_da" or "quantity".
        """
        if name == PRICE_COLUMN:
            return self.price_da
        if name == LOAD_COLUMN and self.load_forecast is not None:
            return self.load_forecast
        raise ValidationError(f"panel has no column '{name}'")

    @property
    def columns(self):
        if self.load_forecast is None:
            return (PRICE_COLUMN,)
        return (PRICE_COLUMN, LOAD_COLUMN)

    def to_frame(self):
        frame = pd.DataFrame({name: self.column(name).values
                              for name in self.columns})
        frame.index.name = DATETIME_COLUMN
        return frame

    @classmethod
    def from_frame(cls, frame):
        price = HourlyTimeSeries(frame[PRICE_COLUMN].rename(PRICE_COLUMN),
                                 DOCUMENT_KINDS["day_ahead_prices"]["unit"])
        load = None
        if LOAD_COLUMN in frame.columns:
            load = HourlyTimeSeries(frame[LOAD_COLUMN].rename(LOAD_COLUMN),
                                    DOCUMENT_KINDS["forecast_load"]["unit"])
        return cls(price, load)

    def localize(self, market_tz=MARKET_TZ_DEFAULT):
        """Applies normalize_dst to every column of a UTC panel."""
        load = None
        if self.load_forecast is not None:
            load = normalize_dst(self.load_forecast, market_tz)
        return MarketPanel(normalize_dst(self.price_da, market_tz), load)

    def slice_days(self, first_day, last_day):
        """Rows whose market day lies in [first_day, last_day]."""
        days = self.index.normalize()
        mask = (days >= pd.Timestamp(first_day)) & (days <= pd.Timestamp(last_day))
        load = None
        if self.load_forecast is not None:
            load = HourlyTimeSeries(self.load_forecast.values[mask],
                                    self.load_forecast.unit)
        return MarketPanel(HourlyTimeSeries(self.price_da.values[mask],
                                            self.price_da.unit), load)


def _dst_kind(label, market_tz):
    """Classifies a naive local label as 'nonexistent', 'ambiguous' or 'regular'."""
    label = pd.Timestamp(label)
    first = label.tz_localize(market_tz, ambiguous=True, nonexistent="NaT")
    if pd.isna(first):
        return "nonexistent"
    second = label.tz_localize(market_tz, ambiguous=False, nonexistent="NaT")
    return "ambiguous" if first != second else "regular"


def normalize_dst(series, market_tz=MARKET_TZ_DEFAULT):
    """
    Collapses the autumn duplicate hour to the mean of its two observations and
    fills the spring-forward hour by linear interpolation of its neighbours.

    Parameters:
        series (HourlyTimeSeries or pd.Series): UTC-aware data (converted to
            market-local labels first) or naive market-local labels, which may
            contain the DST duplicate.
        market_tz (str): IANA zone of the market.

    Returns:
        HourlyTimeSeries: Naive market-local index, 24 rows per day.
    """
    unit = ""
    if isinstance(series, HourlyTimeSeries):
        unit = series.unit
        series = series.values
    raw = series.astype(float)
    if raw.index.tz is not None:
        raw = raw.copy()
        raw.index = raw.index.tz_convert(market_tz).tz_localize(None)
    if len(raw) == 0:
        raise ValidationError("cannot normalize an empty series")

    counts = raw.groupby(level=0).size()
    duplicated = counts[counts > 1]
    bad = [label for label, n in duplicated.items()
           if n > 2 or _dst_kind(label, market_tz) != "ambiguous"]
    if bad:
        raise ParseError(f"duplicate timestamps not explained by DST: "
                         f"{', '.join(str(b) for b in bad[:5])}")
    merged = raw.groupby(level=0).mean()

    start = merged.index[0].floor("D")
    end = merged.index[-1].floor("D") + pd.Timedelta(hours=HOURS_PER_DAY - 1)
    full = pd.date_range(start, end, freq="h")
    missing = full.difference(merged.index)
    spring = [ts for ts in missing if _dst_kind(ts, market_tz) == "nonexistent"]
    other = missing.difference(pd.DatetimeIndex(spring))
    if len(other):
        raise GapError(other)
    if spring:
        merged = merged.reindex(full).interpolate(method="linear",
                                                  limit_area="inside")
        if merged.isna().any():
            raise GapError(merged.index[merged.isna().to_numpy()])
    if len(duplicated) or spring:
        logger.debug(f"DST normalization of '{merged.name}': "
                     f"{len(duplicated)} duplicates averaged, "
                     f"{len(spring)} hours interpolated")
    return HourlyTimeSeries(merged, unit)


def _resolution_minutes(text):
    match = _RESOLUTION_FORMAT.match(text or "")
    if match is None:
        raise MalformedDocument(f"unrecognised resolution '{text}'")
    return int(match.group(1)) * _RESOLUTION_MINUTES[match.group(2)]


def _utc(text):
    ts = pd.Timestamp(text)
    return ts.tz_localize("UTC") if ts.tz is None else ts.tz_convert("UTC")


def _parse_period(period, value_tag, missing_points):
    resolution = _resolution_minutes(period.findtext("{*}resolution"))
    start_text = period.findtext("{*}timeInterval/{*}start")
    if not start_text:
        raise MalformedDocument("Period without timeInterval/start")
    start = _utc(start_text)
    step = pd.Timedelta(minutes=resolution)

    points = {}
    for point in period.findall("{*}Point"):
        pos = point.findtext("{*}position")
        value = point.findtext("{*}" + value_tag)
        if pos is None or value is None:
            raise MalformedDocument(f"Point without position or {value_tag}")
        points[int(pos)] = float(value)
    if not points:
        raise MalformedDocument("Period without Point elements")

    end_text = period.findtext("{*}timeInterval/{*}end")
    slots = max(points)
    if end_text:
        slots = int((_utc(end_text) - start) / step)
    positions = np.arange(1, slots + 1)
    absent = [int(p) for p in positions if p not in points]
    if absent and missing_points == "error":
        raise MalformedDocument(f"Period starting {start} lacks positions {absent}")

    index = start + pd.to_timedelta((positions - 1) * resolution, unit="m")
    values = pd.Series([points.get(int(p), np.nan) for p in positions],
                       index=pd.DatetimeIndex(index))
    if absent:
        logger.warning(f"Interpolating {len(absent)} missing positions in period "
                       f"starting {start}")
        values = values.interpolate(method="linear", limit_direction="both")
    return resolution, values


def parse_document(content, value_tag,
                   resolution_preference=RESOLUTION_PREFERENCE_DEFAULT,
                   missing_points=MISSING_POINTS_DEFAULT):
    """
    Parses a Publication_MarketDocument or GL_MarketDocument into an hourly series.

    Parameters:
        content (bytes or str): Raw XML.
        value_tag (str): "price.amount" or "quantity".
        resolution_preference (int): Minutes; blocks at this resolution are used
            when present, otherwise the finest resolution averaged to hourly.
        missing_points (str): "error" raises MalformedDocument on absent Point
            positions, "interpolate" fills them linearly.

    Returns:
        pd.Series: UTC-indexed hourly values.
    """
    if missing_points not in MISSING_POINTS_MODES:
        raise ValidationError(f"missing_points must be one of {MISSING_POINTS_MODES}")
    try:
        root = ET.fromstring(content)
    except ET.ParseError as exc:
        raise MalformedDocument(f"invalid XML: {exc}") from exc

    if root.tag.endswith("Acknowledgement_MarketDocument"):
        reason = root.findtext(".//{*}Reason/{*}text") or "no data"
        raise MalformedDocument(f"provider acknowledgement: {reason}")

    blocks = []
    for series in root.findall(".//{*}TimeSeries"):
        for period in series.findall("{*}Period"):
            blocks.append(_parse_period(period, value_tag, missing_points))
    if not blocks:
        raise MalformedDocument("document holds no TimeSeries/Period/Point data")

    resolutions = sorted({res for res, _ in blocks})
    chosen = resolution_preference if resolution_preference in resolutions \
        else resolutions[0]
    if chosen > 60 or 60 % chosen:
        raise MalformedDocument(f"cannot build hourly values from {chosen}-minute data")
    values = pd.concat([v for res, v in blocks if res == chosen])
    values = values[~values.index.duplicated(keep="first")].sort_index()
    if chosen < 60:
        values = values.groupby(values.index.floor("h")).mean()
    values.index.name = DATETIME_COLUMN
    return values


def _requests_get(url, params):
    return requests.get(url, params=params, timeout=TIMEOUT_DEFAULT)


def _acknowledgement_reason(content):
    try:
        root = ET.fromstring(content)
    except ET.ParseError:
        return None
    for element in root.iter():
        if element.tag.endswith("text") and element.text:
            return element.text
    return None


def _year_chunks(start, end):
    """Splits [start, end) at calendar-year boundaries."""
    chunk_start = start
    while chunk_start < end:
        chunk_end = min(date(chunk_start.year + 1, 1, 1), end)
        yield chunk_start, chunk_end
        chunk_start = chunk_end


class EntsoeClient:
    """
    Thin client for the Transparency Platform REST API.

    The client is reentrant: it holds no per-request state. Responses may be
    cached on disk under a SHA-256 of the query (the token excluded); cache files
    are written atomically.
    """

    def __init__(self,
                 security_token,
                 transport=None,
                 cache_dir=None,
                 market_tz=MARKET_TZ_DEFAULT,
                 max_retries=MAX_RETRIES_DEFAULT,
                 backoff=BACKOFF_DEFAULT,
                 missing_points=MISSING_POINTS_DEFAULT,
                 url=ENTSOE_URL_DEFAULT,
                 sleep=time.sleep):
        """
        Parameters:
            security_token (str): Personal API token.
            transport (callable): get(url, params) returning an object with
                `status_code` and `content`. Defaults to requests.get.
            cache_dir (str or Path): Optional response cache directory.
            market_tz (str): Zone whose local midnight bounds each request.
            max_retries (int): Retries on 429/5xx and connection failures.
            backoff (float): Seconds before the first retry; doubles each time.
            missing_points (str): See parse_document.
        """
        if not security_token:
            raise AuthError("ENTSO-E security token is empty")
        self.security_token = security_token
        self.transport = transport or _requests_get
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.market_tz = market_tz
        self.max_retries = int(max_retries)
        self.backoff = float(backoff)
        self.missing_points = missing_points
        self.url = url
        self.sleep = sleep

    def _cache_path(self, params):
        if self.cache_dir is None:
            return None
        key = json.dumps(params, sort_keys=True).encode("utf-8")
        return self.cache_dir / f"{hashlib.sha256(key).hexdigest()}.xml"

    def _cache_write(self, path, content):
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        with os.fdopen(fd, "wb") as f:
            f.write(content)
        os.replace(tmp, path)

    def request(self, params):
        """
        Issues one GET, retrying 429/5xx with exponential backoff.

        Parameters:
            params (dict): Query parameters without the token.

        Returns:
            bytes: Response body.
        """
        cache = self._cache_path(params)
        if cache is not None and cache.exists():
            logger.debug(f"Cache hit {cache.name}")
            return cache.read_bytes()

        query = dict(params, securityToken=self.security_token)
        failure = None
        for attempt in range(self.max_retries + 1):
            try:
                response = self.transport(self.url, query)
            except requests.RequestException as exc:
                failure = NetworkError(f"request failed: {exc}")
            else:
                status = response.status_code
                if status == 200:
                    content = response.content
                    if cache is not None and b"Acknowledgement_MarketDocument" not in content:
                        self._cache_write(cache, content)
                    return content
                if status == 401:
                    raise AuthError("ENTSO-E rejected the security token (HTTP 401)")
                if status == 400:
                    reason = _acknowledgement_reason(response.content)
                    raise BadInterval(f"HTTP 400: {reason or 'bad request'}")
                if status == 429:
                    failure = RateLimited("HTTP 429: rate limit exceeded")
                elif status >= 500:
                    failure = NetworkError(f"HTTP {status} from provider")
                else:
                    raise NetworkError(f"unexpected HTTP status {status}")
            if attempt < self.max_retries:
                delay = self.backoff * 2 ** attempt
                logger.warning(f"{failure}; retry {attempt + 1}/{self.max_retries} "
                               f"in {delay:g}s")
                self.sleep(delay)
        raise failure

    def _bounds(self, day):
        local = pd.Timestamp(day).tz_localize(self.market_tz)
        return local.tz_convert("UTC")

    def _fetch(self, base_params, start, end, kind, resolution_preference):
        start = pd.Timestamp(start).date()
        end = pd.Timestamp(end).date()
        if not start < end:
            raise ValidationError(f"start {start} must precede end {end}")
        spec = DOCUMENT_KINDS[kind]
        pieces = []
        for chunk_start, chunk_end in _year_chunks(start, end):
            params = dict(base_params,
                          periodStart=self._bounds(chunk_start).strftime(_API_TIME_FORMAT),
                          periodEnd=self._bounds(chunk_end).strftime(_API_TIME_FORMAT))
            logger.info(f"Fetching {kind} {chunk_start} to {chunk_end}")
            pieces.append(parse_document(self.request(params), spec["value_tag"],
                                         resolution_preference, self.missing_points))
        values = pd.concat(pieces)
        values = values[~values.index.duplicated(keep="first")].sort_index()
        first, stop = self._bounds(start), self._bounds(end)
        values = values[(values.index >= first) & (values.index < stop)]
        expected = pd.date_range(first, stop, freq="h", inclusive="left")
        missing = expected.difference(values.index)
        if len(missing):
            raise GapError(missing)
        return HourlyTimeSeries(values.rename(spec["column"]), spec["unit"])

    def get_day_ahead_pricing(self, start, end, domain=DOMAIN_DEFAULT,
                              resolution_preference=RESOLUTION_PREFERENCE_DEFAULT):
        """
        Day-ahead prices (document type A44) for market days [start, end).

        Returns:
            HourlyTimeSeries: UTC-indexed prices in EUR/MWh.
        """
        params = {"documentType": "A44", "in_Domain": domain, "out_Domain": domain}
        return self._fetch(params, start, end, "day_ahead_prices",
                           resolution_preference)

    def get_forecast_load(self, start, end, domain=DOMAIN_DEFAULT,
                          resolution_preference=RESOLUTION_PREFERENCE_DEFAULT):
        """
        Day-ahead total load forecast (A65, process A01) for market days [start, end).

        Returns:
            HourlyTimeSeries: UTC-indexed load in MWh.
        """
        params = {"documentType": "A65", "processType": "A01",
                  "outBiddingZone_Domain": domain}
        return self._fetch(params, start, end, "forecast_load",
                           resolution_preference)

    def fetch_panel(self, start, end, domain=DOMAIN_DEFAULT, with_load=True):
        """Prices joined with the load forecast, still UTC-indexed."""
        prices = self.get_day_ahead_pricing(start, end, domain)
        load = self.get_forecast_load(start, end, domain) if with_load else None
        return MarketPanel(prices, load)


def _client_for(req, client, **client_kwargs):
    return client or EntsoeClient(req.security_token, **client_kwargs)


def fetch_day_ahead_prices(req, client=None, **client_kwargs):
    """
    Fetches day-ahead prices described by an EntsoeRequest.

    Parameters:
        req (EntsoeRequest): The query.
        client (EntsoeClient): Optional preconfigured client.

    Returns:
        HourlyTimeSeries: UTC-indexed prices covering [period_start, period_end).
    """
    return _client_for(req, client, **client_kwargs).get_day_ahead_pricing(
        req.period_start, req.period_end, req.domain_code, req.resolution_preference)


def fetch_forecast_load(req, client=None, **client_kwargs):
    """As fetch_day_ahead_prices, for the load forecast in MWh."""
    return _client_for(req, client, **client_kwargs).get_forecast_load(
        req.period_start, req.period_end, req.domain_code, req.resolution_preference)


def load_csv(path, value_columns=None, market_tz=MARKET_TZ_DEFAULT, normalize=True):
    """
    Loads a panel CSV: a `datetime` column of ISO-8601 UTC instants plus value
    columns (`price_da` and optionally `quantity`).

    Rows may come in any order. Duplicate instants are rejected.

    Parameters:
        path (str or Path): CSV file.
        value_columns (tuple): Columns to load. Defaults to every known column
            present in the header.
        market_tz (str): Zone used for DST normalization.
        normalize (bool): Convert to market-local labels with normalize_dst.
            False keeps the UTC index and only checks for gaps.

    Returns:
        MarketPanel
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Panel file not found: {path}")
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    if value_columns is None:
        value_columns = tuple(c for c in (PRICE_COLUMN, LOAD_COLUMN)
                              if c in frame.columns)
    expected = (DATETIME_COLUMN, PRICE_COLUMN)
    missing = [c for c in expected + tuple(value_columns) if c not in frame.columns]
    if missing:
        raise ParseError(f"{path.name}: header lacks columns {missing}")

    times = pd.to_datetime(frame[DATETIME_COLUMN], utc=True, errors="coerce")
    if times.isna().any():
        row = int(np.flatnonzero(times.isna().to_numpy())[0])
        raise ParseError(f"unparseable datetime '{frame[DATETIME_COLUMN].iloc[row]}'",
                         row=row + 1)
    columns = {}
    for name in value_columns:
        values = pd.to_numeric(frame[name], errors="coerce").to_numpy(dtype=float)
        bad = np.flatnonzero(~np.isfinite(values))
        if len(bad):
            raise ParseError(f"non-numeric {name} '{frame[name].iloc[bad[0]]}'",
                             row=int(bad[0]) + 1)
        columns[name] = values

    table = pd.DataFrame(columns, index=pd.DatetimeIndex(times))
    table["_row"] = np.arange(1, len(table) + 1)
    table = table.sort_index(kind="mergesort")
    dup = table.index.duplicated(keep="first")
    if dup.any():
        raise ParseError(f"duplicate timestamp {table.index[dup][0]}",
                         row=int(table["_row"][dup][0]))
    table = table.drop(columns="_row")
    table.index.name = DATETIME_COLUMN

    panel = MarketPanel.from_frame(table)
    if normalize:
        return panel.localize(market_tz)
    panel.price_da.require_gap_free(whole_days=False)
    return panel


def write_panel_csv(panel, path):
    """
    Writes a panel as CSV. UTC-indexed panels get `...Z` instants, market-local
    panels their naive labels.
    """
    frame = panel.to_frame()
    if frame.index.tz is not None:
        frame.index = frame.index.tz_convert("UTC").strftime("%Y-%m-%dT%H:%M:%SZ")
    frame.index.name = DATETIME_COLUMN
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path)
    logger.info(f"Wrote {len(frame)} rows to {path}")
    return path
