import json
import os

import pandas as pd
import pytest

from qra.errors import ConfigError
from qra_framework import run_experiment

CONFIG = {
    "data": {"source": "synthetic", "days": 90, "seed": 7},
    "transforms": [{"vst": "none"}, {"vst": "arcsinh"}],
    "features": {"lags": [1, 2, 7], "exogenous": ["quantity"]},
    "point": {"models": ["ols"], "windows": [28]},
    "backtest": {"window": 14, "variants": ["QRA", "QRM"], "alphas": [50],
                 "quantiles": [25, 50, 75]},
}


@pytest.fixture
def root(tmp_path, monkeypatch):
    monkeypatch.setattr(run_experiment, "ROOT_DIR", str(tmp_path))
    return tmp_path


def _write(tmp_path, config):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(config))
    return str(path)


def test_synthetic_experiment_bundle(root):
    exp_path = run_experiment.run(_write(root, CONFIG), exp_name="small")
    assert exp_path == os.path.join(str(root), "data", "small")
    files = set(os.listdir(exp_path))
    assert {"points.csv", "point_metrics.csv", "metrics.csv", "aps.csv", "config.json",
            "surface_QRA.csv", "surface_QRM.csv"} <= files
    points = pd.read_csv(os.path.join(exp_path, "point_metrics.csv"), index_col=0)
    assert list(points.index) == ["ols_w28", "ols_arcsinh_w28"]
    # first point forecast day is 28 + 7 days in, the QRA window takes 14 more
    surface = pd.read_csv(os.path.join(exp_path, "surface_QRA.csv"))
    assert len(surface) == (90 - 35 - 14) * 24
    assert os.path.realpath(root / "data" / "latest") == os.path.realpath(exp_path)


def test_csv_source_needs_path(root):
    config = dict(CONFIG, data={"source": "csv"})
    with pytest.raises(ConfigError, match="data.path"):
        run_experiment.run(_write(root, config), exp_name="broken")
