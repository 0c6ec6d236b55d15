import os
from datetime import date

import numpy as np
import pandas as pd
import pytest
import requests

from qra.core import HourlyTimeSeries
from qra.errors import (AuthError, BadInterval, GapError, MalformedDocument, NetworkError,
                        ParseError, RateLimited, ValidationError)
from qra.ingest import (LOAD_COLUMN, PRICE_COLUMN, EntsoeClient, EntsoeRequest, MarketPanel,
                        _year_chunks, fetch_day_ahead_prices, fetch_forecast_load, load_csv,
                        normalize_dst, parse_document, write_panel_csv)

from conftest import FakeResponse, FakeTransport

PRICES = [22.34, 17.93, 15.17, 16.38, 17.38, 20.67, 29.80, 35.02, 38.13, 38.39, 37.90, 37.01,
          35.36, 34.54, 35.05, 36.92, 43.64, 49.94, 46.66, 41.42, 36.39, 35.52, 31.39, 28.97]
FIRST_INSTANT = pd.Timestamp("2015-01-04 23:00", tz="UTC")


def _client(*responses, **kwargs):
    transport = FakeTransport(*responses)
    sleeps = []
    kwargs.setdefault("sleep", sleeps.append)
    return EntsoeClient("token", transport=transport, **kwargs), transport, sleeps


def test_parse_hourly_prices(fixture_bytes):
    values = parse_document(fixture_bytes("prices_pt60m.xml"), "price.amount")
    assert len(values) == 24
    assert values.index[0] == FIRST_INSTANT
    assert values.index[-1] == pd.Timestamp("2015-01-05 22:00", tz="UTC")
    np.testing.assert_allclose(values.to_numpy(), PRICES)


def test_missing_position_raises_by_default(fixture_bytes):
    with pytest.raises(MalformedDocument, match=r"\[13\]"):
        parse_document(fixture_bytes("prices_missing_position.xml"), "price.amount")


def test_missing_position_interpolated_on_request(fixture_bytes):
    values = parse_document(fixture_bytes("prices_missing_position.xml"), "price.amount",
                            missing_points="interpolate")
    assert len(values) == 24
    assert values.iloc[12] == pytest.approx((37.01 + 34.54) / 2)


def test_quarter_hour_load_is_averaged(fixture_bytes):
    values = parse_document(fixture_bytes("load_pt15m.xml"), "quantity")
    assert len(values) == 24
    assert values.index[0] == FIRST_INSTANT
    expected = [50326.5, 48599.5, 47364.0] + [46000.0 + 400 * h for h in range(3, 24)]
    np.testing.assert_allclose(values.to_numpy(), expected)


def test_empty_period_is_malformed(fixture_bytes):
    with pytest.raises(MalformedDocument, match="without Point"):
        parse_document(fixture_bytes("load_empty_period.xml"), "quantity")


def test_acknowledgement_is_malformed(fixture_bytes):
    with pytest.raises(MalformedDocument, match="No matching data"):
        parse_document(fixture_bytes("acknowledgement.xml"), "price.amount")


def test_invalid_xml_and_mode():
    with pytest.raises(MalformedDocument):
        parse_document(b"<not-closed", "price.amount")
    with pytest.raises(ValidationError):
        parse_document(b"<a/>", "price.amount", missing_points="drop")


def test_client_fetches_prices(fixture_bytes):
    client, transport, _ = _client(FakeResponse(200, fixture_bytes("prices_pt60m.xml")))
    prices = client.get_day_ahead_pricing(date(2015, 1, 5), date(2015, 1, 6))
    assert prices.name == PRICE_COLUMN
    assert prices.unit == "EUR/MWh"
    np.testing.assert_allclose(prices.to_numpy(), PRICES)
    _, params = transport.calls[0]
    assert params["documentType"] == "A44"
    assert params["periodStart"] == "201501042300"
    assert params["periodEnd"] == "201501052300"
    assert params["securityToken"] == "token"


def test_fetch_with_request_object(fixture_bytes):
    client, _, _ = _client(FakeResponse(200, fixture_bytes("prices_pt60m.xml")))
    req = EntsoeRequest("token", period_start=date(2015, 1, 5), period_end=date(2015, 1, 6))
    assert len(fetch_day_ahead_prices(req, client=client)) == 24


def test_fetch_forecast_load(fixture_bytes):
    client, transport, _ = _client(FakeResponse(200, fixture_bytes("load_pt15m.xml")))
    req = EntsoeRequest("token", period_start=date(2015, 1, 5), period_end=date(2015, 1, 6),
                        document_kind="forecast_load")
    load = fetch_forecast_load(req, client=client)
    assert load.name == LOAD_COLUMN
    assert load.unit == "MWh"
    assert len(load) == 24
    _, params = transport.calls[0]
    assert params["documentType"] == "A65"
    assert params["processType"] == "A01"


def test_client_reports_gaps(fixture_bytes):
    client, _, _ = _client(FakeResponse(200, fixture_bytes("prices_pt60m.xml")))
    with pytest.raises(GapError) as info:
        client.get_day_ahead_pricing(date(2015, 1, 5), date(2015, 1, 7))
    assert len(info.value.missing) == 24


def test_unauthorized_is_not_retried():
    client, transport, sleeps = _client(FakeResponse(401))
    with pytest.raises(AuthError):
        client.request({"documentType": "A44"})
    assert len(transport.calls) == 1
    assert sleeps == []


def test_bad_interval_carries_reason(fixture_bytes):
    client, _, _ = _client(FakeResponse(400, fixture_bytes("acknowledgement.xml")))
    with pytest.raises(BadInterval, match="No matching data"):
        client.request({"documentType": "A44"})


def test_rate_limit_retries_with_backoff():
    client, transport, sleeps = _client(FakeResponse(429), max_retries=3, backoff=0.5)
    with pytest.raises(RateLimited):
        client.request({"documentType": "A44"})
    assert len(transport.calls) == 4
    assert sleeps == [0.5, 1.0, 2.0]


def test_server_error_then_success(fixture_bytes):
    body = fixture_bytes("prices_pt60m.xml")
    client, transport, sleeps = _client(FakeResponse(503), FakeResponse(200, body))
    assert client.request({"documentType": "A44"}) == body
    assert len(transport.calls) == 2
    assert sleeps == [1.0]


def test_connection_failure_becomes_network_error():
    client, transport, _ = _client(requests.ConnectionError("refused"), max_retries=1)
    with pytest.raises(NetworkError, match="refused"):
        client.request({"documentType": "A44"})
    assert len(transport.calls) == 2


def test_cache_serves_repeated_queries(tmp_path, fixture_bytes):
    body = fixture_bytes("prices_pt60m.xml")
    client, transport, _ = _client(FakeResponse(200, body), cache_dir=tmp_path)
    params = {"documentType": "A44", "periodStart": "201501042300"}
    first = client.request(params)
    second = client.request(params)
    assert first == second == body
    assert len(transport.calls) == 1
    cached = list(tmp_path.glob("*.xml"))
    assert len(cached) == 1
    assert cached[0].read_bytes() == body


def test_cache_skips_acknowledgements(tmp_path, fixture_bytes):
    body = fixture_bytes("acknowledgement.xml")
    client, transport, _ = _client(FakeResponse(200, body), cache_dir=tmp_path)
    client.request({"documentType": "A44"})
    client.request({"documentType": "A44"})
    assert len(transport.calls) == 2
    assert list(tmp_path.glob("*.xml")) == []


def test_empty_token_rejected():
    with pytest.raises(AuthError):
        EntsoeClient("")
    with pytest.raises(AuthError):
        EntsoeRequest("", period_start=date(2015, 1, 1), period_end=date(2015, 1, 2))
    with pytest.raises(ValidationError):
        EntsoeRequest("token", period_start=date(2015, 1, 2), period_end=date(2015, 1, 1))


def test_year_chunks():
    chunks = list(_year_chunks(date(2015, 6, 1), date(2017, 2, 1)))
    assert chunks == [(date(2015, 6, 1), date(2016, 1, 1)),
                      (date(2016, 1, 1), date(2017, 1, 1)),
                      (date(2017, 1, 1), date(2017, 2, 1))]


def test_autumn_duplicate_is_averaged():
    index = pd.date_range("2015-10-24 22:00", periods=25, freq="h", tz="UTC")
    values = np.zeros(25)
    values[2], values[3] = 40.0, 44.0
    local = normalize_dst(pd.Series(values, index=index, name=PRICE_COLUMN))
    assert len(local) == 24
    assert local.values[pd.Timestamp("2015-10-25 02:00")] == pytest.approx(42.0)
    assert local.index.tz is None


def test_spring_gap_is_interpolated():
    index = pd.date_range("2015-03-28 23:00", periods=23, freq="h", tz="UTC")
    values = np.zeros(23)
    values[1], values[2] = 10.0, 20.0
    local = normalize_dst(HourlyTimeSeries(pd.Series(values, index=index, name=PRICE_COLUMN)))
    assert len(local) == 24
    assert local.values[pd.Timestamp("2015-03-29 02:00")] == pytest.approx(15.0)


def test_unexplained_holes_and_duplicates():
    index = pd.date_range("2015-01-05", periods=24, freq="h").delete(5)
    with pytest.raises(GapError):
        normalize_dst(pd.Series(np.ones(23), index=index))
    dup = pd.DatetimeIndex(list(pd.date_range("2015-01-05", periods=24, freq="h"))
                           + [pd.Timestamp("2015-01-05 07:00")]).sort_values()
    with pytest.raises(ParseError):
        normalize_dst(pd.Series(np.ones(25), index=dup))


def _write_panel(path, rows):
    lines = ["datetime,price_da,quantity"] + [f"{t},{p},{q}" for t, p, q in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def _utc_rows(hours=48):
    instants = pd.date_range(FIRST_INSTANT, periods=hours, freq="h")
    return [(ts.strftime("%Y-%m-%dT%H:%M:%SZ"), 30.0 + i, 50000.0 + i)
            for i, ts in enumerate(instants)]


def test_load_csv_two_days(tmp_path):
    panel = load_csv(_write_panel(tmp_path / "panel.csv", _utc_rows()))
    assert len(panel) == 48
    assert panel.columns == (PRICE_COLUMN, LOAD_COLUMN)
    assert panel.index[0] == pd.Timestamp("2015-01-05 00:00")
    assert panel.column(PRICE_COLUMN).days() == [date(2015, 1, 5), date(2015, 1, 6)]


def test_load_csv_ignores_row_order(tmp_path):
    rows = _utc_rows()
    shuffled = [rows[i] for i in np.random.default_rng(4).permutation(len(rows))]
    ordered = load_csv(_write_panel(tmp_path / "a.csv", rows))
    mixed = load_csv(_write_panel(tmp_path / "b.csv", shuffled))
    pd.testing.assert_frame_equal(ordered.to_frame(), mixed.to_frame())


def test_load_csv_rejects_duplicates_with_row(tmp_path):
    rows = _utc_rows()
    rows.append(rows[3])
    with pytest.raises(ParseError) as info:
        load_csv(_write_panel(tmp_path / "dup.csv", rows))
    assert info.value.row == 49


def test_load_csv_row_numbers(tmp_path):
    rows = _utc_rows()
    rows[6] = ("not-a-time", 1.0, 2.0)
    with pytest.raises(ParseError, match="row 7"):
        load_csv(_write_panel(tmp_path / "time.csv", rows))
    rows = _utc_rows()
    rows[9] = (rows[9][0], "n/a", 2.0)
    with pytest.raises(ParseError) as info:
        load_csv(_write_panel(tmp_path / "value.csv", rows))
    assert info.value.row == 10


def test_load_csv_header_and_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_csv(tmp_path / "absent.csv")
    bad = tmp_path / "header.csv"
    bad.write_text("time,price\n2015-01-04T23:00:00Z,1\n")
    with pytest.raises(ParseError, match="header"):
        load_csv(bad)


def test_load_csv_reports_gaps(tmp_path):
    rows = _utc_rows()
    del rows[10]
    with pytest.raises(GapError):
        load_csv(_write_panel(tmp_path / "gap.csv", rows))


def test_panel_csv_round_trip(tmp_path):
    rows = _utc_rows()
    raw = load_csv(_write_panel(tmp_path / "in.csv", rows), normalize=False)
    assert raw.index.tz is not None
    out = write_panel_csv(raw, tmp_path / "out.csv")
    assert out.read_text().splitlines()[1].startswith("2015-01-04T23:00:00Z")
    again = load_csv(out)
    assert again.column(LOAD_COLUMN).to_numpy()[0] == 50000.0


def test_panel_inner_join():
    index = pd.date_range("2016-01-01", periods=48, freq="h")
    price = HourlyTimeSeries(pd.Series(np.arange(48.0), index=index, name=PRICE_COLUMN))
    load = HourlyTimeSeries(pd.Series(np.arange(24.0), index=index[24:], name=LOAD_COLUMN))
    panel = MarketPanel(price, load)
    assert len(panel) == 24
    assert panel.slice_days(date(2016, 1, 2), date(2016, 1, 2)).index.equals(index[24:])
    with pytest.raises(ValidationError):
        MarketPanel(price).column(LOAD_COLUMN)


@pytest.mark.network
def test_live_day_ahead_prices():
    client = EntsoeClient(os.environ["ENTSOE_TOKEN"])
    prices = client.get_day_ahead_pricing(date(2016, 1, 4), date(2016, 1, 5))
    assert len(prices) == 24
