"""
Run configuration: one JSON file mirroring every module's settings.

The file is validated in full before any work starts. Unknown keys and wrong types
raise ConfigError naming the offending path (e.g. "backtest.alphas[1]").

Example:

    {
        "data": {"source": "csv", "path": "panel.csv"},
        "transforms": [{"vst": "none"}, {"vst": "arcsinh"}],
        "features": {"lags": [1, 2, 7], "exogenous": ["quantity"]},
        "point": {"windows": [182, 364], "first_prediction_day": "2016-01-01",
                  "last_prediction_day": "2016-12-31"},
        "backtest": {"window": 72, "variants": ["QRA", "SQRA"], "alphas": [50, 70, 90]},
        "output": "qra_framework/data/de_2016"
    }
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields
from datetime import date

import pandas as pd

from qra.errors import ConfigError
from qra.evaluate import ALPHAS_DEFAULT
from qra.ingest import (DOMAIN_DEFAULT, MARKET_TZ_DEFAULT, MISSING_POINTS_DEFAULT,
                        MISSING_POINTS_MODES)
from qra.pointmodel import (EXOGENOUS_DEFAULT, LAGS_DEFAULT, MODEL_KINDS,
                            WINDOW_DAYS_DEFAULT)
from qra.transform import SCALER_KINDS, VST_KINDS
from qra.variants import VARIANT_NAMES

TOKEN_ENV = "ENTSOE_TOKEN"
OUTPUT_DEFAULT = "qra_output"
SOURCES = ("csv", "entsoe", "synthetic")
CALIBRATION_WINDOW_DEFAULT = 72

# section -> {key: (type(s), required)}
_SCHEMA = {
    "data": {
        "source": (str, True),
        "path": (str, False),
        "domain": (str, False),
        "start": (str, False),
        "end": (str, False),
        "market_tz": (str, False),
        "cache_dir": (str, False),
        "missing_points": (str, False),
        "with_load": (bool, False),
        "seed": (int, False),
        "days": (int, False),
    },
    "features": {
        "lags": (list, False),
        "exogenous": (list, False),
        "include_intercept": (bool, False),
    },
    "point": {
        "models": (list, False),
        "windows": (list, False),
        "per_hour": (bool, False),
        "first_prediction_day": (str, False),
        "last_prediction_day": (str, False),
    },
    "backtest": {
        "window": (int, False),
        "variants": (list, False),
        "alphas": (list, False),
        "quantiles": (list, False),
        "crossing_repair": (bool, False),
        "significance": ((int, float), False),
        "skip_failed": (bool, False),
        "params": (dict, False),
    },
}
_TRANSFORM_KEYS = {"vst": str, "scaler": str, "lambda": (int, float), "c": (int, float),
                   "poly_exponent": str, "pit_reference": str}
_TOP_LEVEL = set(_SCHEMA) | {"transforms", "output", "jobs"}
_VARIANT_PARAMS = {"factor_count": int, "lambda_l1": (int, float),
                   "penalize_intercept": bool, "h": (int, float),
                   "bandwidth_rule": str, "include_intercept": bool, "row_std": str}


@dataclass(frozen=True)
class RunConfig:
    """
    Validated contents of a run configuration file.

    Sections are kept as plain dicts (already checked) so they can be echoed
    verbatim into report bundles.
    """

    data: dict = field(default_factory=lambda: {"source": "csv"})
    transforms: tuple = ({"vst": "none"},)
    features: dict = field(default_factory=dict)
    point: dict = field(default_factory=dict)
    backtest: dict = field(default_factory=dict)
    output: str = OUTPUT_DEFAULT
    jobs: int = 1

    @property
    def window(self):
        return self.backtest.get("window", CALIBRATION_WINDOW_DEFAULT)

    @property
    def variants(self):
        return tuple(self.backtest.get("variants", ("QRA",)))

    @property
    def alphas(self):
        return tuple(self.backtest.get("alphas", ALPHAS_DEFAULT))

    @property
    def market_tz(self):
        return self.data.get("market_tz", MARKET_TZ_DEFAULT)

    @property
    def lags(self):
        return tuple(self.features.get("lags", LAGS_DEFAULT))

    @property
    def exogenous(self):
        return tuple(self.features.get("exogenous", EXOGENOUS_DEFAULT))

    @property
    def point_windows(self):
        return tuple(self.point.get("windows", (WINDOW_DAYS_DEFAULT,)))

    def to_dict(self):
        return {f.name: (list(getattr(self, f.name)) if f.name == "transforms"
                         else getattr(self, f.name)) for f in fields(self)}


def _fail(path, message):
    raise ConfigError(f"{path}: {message}")


def _check_type(path, value, expected):
    allowed = expected if isinstance(expected, tuple) else (expected,)
    # bool is an int subclass
    if not isinstance(value, allowed) or (isinstance(value, bool) and bool not in allowed):
        _fail(path, f"expected {_type_name(expected)}, got {type(value).__name__}")


def _type_name(expected):
    if isinstance(expected, tuple):
        return " or ".join(t.__name__ for t in expected)
    return expected.__name__


def _check_date(path, value):
    try:
        return pd.Timestamp(value).date()
    except (ValueError, TypeError):
        _fail(path, f"not an ISO date: {value!r}")


def _check_section(name, section):
    _check_type(name, section, dict)
    schema = _SCHEMA[name]
    for key in section:
        if key not in schema:
            _fail(f"{name}.{key}", "unknown key")
    for key, (expected, required) in schema.items():
        if key not in section:
            if required:
                _fail(f"{name}.{key}", "required key is missing")
            continue
        _check_type(f"{name}.{key}", section[key], expected)


def _check_items(path, items, expected, allowed=None):
    for i, item in enumerate(items):
        _check_type(f"{path}[{i}]", item, expected)
        if allowed is not None and item not in allowed:
            _fail(f"{path}[{i}]", f"{item!r} is not one of {', '.join(map(str, allowed))}")


def validate(raw):
    """
    Checks a parsed configuration document.

    Parameters:
        raw (dict): Parsed JSON.

    Returns:
        RunConfig
    """
    _check_type("config", raw, dict)
    for key in raw:
        if key not in _TOP_LEVEL:
            _fail(key, "unknown key")
    for name in _SCHEMA:
        if name in raw:
            _check_section(name, raw[name])

    data = dict(raw.get("data", {"source": "csv"}))
    if data.get("source", "csv") not in SOURCES:
        _fail("data.source", f"expected one of {', '.join(SOURCES)}")
    if data.get("source", "csv") == "csv" and "path" not in data and "data" in raw:
        _fail("data.path", "required when data.source is csv")
    if data.get("source") == "entsoe":
        for key in ("start", "end"):
            if key not in data:
                _fail(f"data.{key}", "required when data.source is entsoe")
        if _check_date("data.start", data["start"]) >= _check_date("data.end", data["end"]):
            _fail("data.end", "must be after data.start")
        data.setdefault("domain", DOMAIN_DEFAULT)
    if data.get("missing_points", MISSING_POINTS_DEFAULT) not in MISSING_POINTS_MODES:
        _fail("data.missing_points", f"expected one of {', '.join(MISSING_POINTS_MODES)}")

    transforms = raw.get("transforms", [{"vst": "none"}])
    _check_type("transforms", transforms, list)
    if not transforms:
        _fail("transforms", "at least one transform is required")
    for i, spec in enumerate(transforms):
        path = f"transforms[{i}]"
        _check_type(path, spec, dict)
        for key, value in spec.items():
            if key not in _TRANSFORM_KEYS:
                _fail(f"{path}.{key}", "unknown key")
            _check_type(f"{path}.{key}", value, _TRANSFORM_KEYS[key])
        if spec.get("vst", "none") not in VST_KINDS:
            _fail(f"{path}.vst", f"expected one of {', '.join(VST_KINDS)}")
        if "scaler" in spec and spec["scaler"] not in SCALER_KINDS:
            _fail(f"{path}.scaler", f"expected one of {', '.join(SCALER_KINDS)}")

    features = raw.get("features", {})
    _check_items("features.lags", features.get("lags", []), int)
    if any(lag < 1 for lag in features.get("lags", [])):
        _fail("features.lags", "lags must be >= 1")
    _check_items("features.exogenous", features.get("exogenous", []), str)

    point = raw.get("point", {})
    _check_items("point.models", point.get("models", []), str, MODEL_KINDS)
    _check_items("point.windows", point.get("windows", []), int)
    if any(w < 1 for w in point.get("windows", [])):
        _fail("point.windows", "windows must be positive")
    for key in ("first_prediction_day", "last_prediction_day"):
        if key in point:
            _check_date(f"point.{key}", point[key])

    backtest = raw.get("backtest", {})
    if backtest.get("window", CALIBRATION_WINDOW_DEFAULT) < 2:
        _fail("backtest.window", "calibration window must be >= 2 days")
    _check_items("backtest.variants", backtest.get("variants", []), str,
                 VARIANT_NAMES + ("ALL",))
    _check_items("backtest.alphas", backtest.get("alphas", []), (int, float))
    if any(not 0 < a < 100 for a in backtest.get("alphas", [])):
        _fail("backtest.alphas", "alphas must lie in (0, 100)")
    _check_items("backtest.quantiles", backtest.get("quantiles", []), (int, float))
    if any(not 0 < q < 100 for q in backtest.get("quantiles", [])):
        _fail("backtest.quantiles", "quantiles are percents in (0, 100)")
    if not 0 < backtest.get("significance", 0.05) < 1:
        _fail("backtest.significance", "must lie in (0, 1)")
    for key, value in backtest.get("params", {}).items():
        if key not in _VARIANT_PARAMS:
            _fail(f"backtest.params.{key}", "unknown variant parameter")
        _check_type(f"backtest.params.{key}", value, _VARIANT_PARAMS[key])

    output = raw.get("output", OUTPUT_DEFAULT)
    _check_type("output", output, str)
    jobs = raw.get("jobs", 1)
    _check_type("jobs", jobs, int)
    if jobs < 1:
        _fail("jobs", "must be >= 1")

    return RunConfig(data=data,
                     transforms=tuple(dict(t) for t in transforms),
                     features=dict(features),
                     point=dict(point),
                     backtest=dict(backtest),
                     output=output,
                     jobs=jobs)


def load_config(path):
    """
    Reads and validates a JSON run configuration.

    Parameters:
        path (str): Path to the JSON file.

    Returns:
        RunConfig
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Run configuration file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return validate(raw)


def merge(config_values, flag_values, defaults):
    """
    Resolves settings: config file beats command-line flags, flags beat defaults.

    Parameters:
        config_values (dict): Values present in the config file.
        flag_values (dict): Flags the user set; None means "not given".
        defaults (dict): Fallbacks.

    Returns:
        dict: One value per key of defaults.
    """
    effective = {}
    for key, default in defaults.items():
        if config_values.get(key) is not None:
            effective[key] = config_values[key]
        elif flag_values.get(key) is not None:
            effective[key] = flag_values[key]
        else:
            effective[key] = default
    return effective


def resolve_token(flag_token=None):
    """Token from --token, else the ENTSOE_TOKEN environment variable, else None."""
    return flag_token or os.environ.get(TOKEN_ENV) or None


def parse_day(text):
    """ISO date string to a date, raising ConfigError."""
    if isinstance(text, date):
        return text
    return _check_date("date", text)
