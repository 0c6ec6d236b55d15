import json
from datetime import date
from pathlib import Path

import pytest

from qra.config import (ALPHAS_DEFAULT, CALIBRATION_WINDOW_DEFAULT, TOKEN_ENV, load_config,
                        merge, parse_day, resolve_token, validate)
from qra.errors import ConfigError, ValidationError

CONFIG_DIR = Path(__file__).parents[1] / "qra_framework" / "configs"


@pytest.mark.parametrize("name", ["synthetic.json", "de_2015_2017.json"])
def test_bundled_configs_validate(name):
    config = load_config(CONFIG_DIR / name)
    assert config.variants == ("QRA", "QRM", "SQRA", "SQRM")
    assert config.lags == (1, 2, 7)


def test_defaults():
    config = validate({})
    assert config.window == CALIBRATION_WINDOW_DEFAULT
    assert config.variants == ("QRA",)
    assert config.alphas == ALPHAS_DEFAULT
    assert config.transforms == ({"vst": "none"},)
    assert config.jobs == 1
    assert config.to_dict()["transforms"] == [{"vst": "none"}]


def test_entsoe_source_gets_default_domain():
    config = validate({"data": {"source": "entsoe", "start": "2015-01-01",
                                "end": "2015-02-01"}})
    assert config.data["domain"] == "10Y1001A1001A63L"
    assert config.market_tz == "Europe/Berlin"


@pytest.mark.parametrize("raw, path", [
    ({"outputs": "x"}, "outputs"),
    ({"backtest": {"windw": 3}}, "backtest.windw"),
    ({"backtest": {"alphas": [50, "90"]}}, r"backtest.alphas\[1\]"),
    ({"backtest": {"alphas": [50, 120]}}, "backtest.alphas"),
    ({"backtest": {"window": 1}}, "backtest.window"),
    ({"backtest": {"variants": ["QRA", "XQRA"]}}, r"backtest.variants\[1\]"),
    ({"backtest": {"significance": True}}, "backtest.significance"),
    ({"backtest": {"params": {"lambda": 1.0}}}, "backtest.params.lambda"),
    ({"backtest": {"params": {"factor_count": 1.5}}}, "backtest.params.factor_count"),
    ({"data": {"path": "p.csv"}}, "data.source"),
    ({"data": {"source": "csv"}}, "data.path"),
    ({"data": {"source": "sql"}}, "data.source"),
    ({"data": {"source": "entsoe", "start": "2015-01-01"}}, "data.end"),
    ({"data": {"source": "entsoe", "start": "2015-02-01", "end": "2015-01-01"}},
     "data.end"),
    ({"data": {"source": "entsoe", "start": "soon", "end": "2015-01-01"}}, "data.start"),
    ({"data": {"source": "csv", "path": "p.csv", "missing_points": "guess"}},
     "data.missing_points"),
    ({"transforms": []}, "transforms"),
    ({"transforms": [{"vst": "cube"}]}, r"transforms\[0\].vst"),
    ({"transforms": [{"vst": "boxcox", "lambda": "half"}]}, r"transforms\[0\].lambda"),
    ({"transforms": [{"vst": "none", "scaler": "minmax"}]}, r"transforms\[0\].scaler"),
    ({"features": {"lags": [1, 0]}}, "features.lags"),
    ({"features": {"exogenous": [3]}}, r"features.exogenous\[0\]"),
    ({"point": {"models": ["arima"]}}, r"point.models\[0\]"),
    ({"point": {"windows": [0]}}, "point.windows"),
    ({"point": {"first_prediction_day": "someday"}}, "point.first_prediction_day"),
    ({"jobs": True}, "jobs"),
    ({"jobs": 0}, "jobs"),
])
def test_validation_names_the_path(raw, path):
    with pytest.raises(ConfigError, match=f"^{path}"):
        validate(raw)


def test_config_error_is_a_validation_error():
    assert issubclass(ConfigError, ValidationError)
    with pytest.raises(ValidationError):
        validate([])


def test_load_config_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "absent.json")
    broken = tmp_path / "broken.json"
    broken.write_text("{\"data\": ")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(broken)


def test_load_config_round_trip(tmp_path):
    raw = {"data": {"source": "synthetic", "days": 90},
           "backtest": {"window": 14, "alphas": [50, 90], "params": {"h": 0.5}},
           "output": "out"}
    path = tmp_path / "run.json"
    path.write_text(json.dumps(raw))
    config = load_config(path)
    assert config.window == 14
    assert config.alphas == (50, 90)
    assert config.backtest["params"] == {"h": 0.5}
    assert config.output == "out"


def test_merge_precedence():
    effective = merge({"window": 30, "alphas": None},
                      {"window": 10, "alphas": (50,), "jobs": None},
                      {"window": 72, "alphas": (50, 90), "jobs": 1})
    assert effective == {"window": 30, "alphas": (50,), "jobs": 1}


def test_resolve_token(monkeypatch):
    monkeypatch.setenv(TOKEN_ENV, "from-env")
    assert resolve_token("from-flag") == "from-flag"
    assert resolve_token() == "from-env"
    monkeypatch.delenv(TOKEN_ENV)
    assert resolve_token() is None
    monkeypatch.setenv(TOKEN_ENV, "")
    assert resolve_token() is None


def test_parse_day():
    assert parse_day("2016-02-29") == date(2016, 2, 29)
    assert parse_day(date(2016, 1, 1)) == date(2016, 1, 1)
    with pytest.raises(ConfigError):
        parse_day("the first of May")
