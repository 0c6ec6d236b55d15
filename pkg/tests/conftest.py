import os
from pathlib import Path

import hypothesis
import numpy as np
import pandas as pd
import pytest

from qra.core import PointForecastMatrix

FIXTURES = Path(__file__).parent / "fixtures"

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=20, deadline=None)
hypothesis.settings.register_profile("ci", max_examples=100, deadline=None)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))


def pytest_addoption(parser):
    parser.addoption("--run-network", action="store_true", default=False,
                     help="Run tests that call the live ENTSO-E API")


def pytest_configure(config):
    config.addinivalue_line("markers", "network: needs --run-network and ENTSOE_TOKEN")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-network") and os.environ.get("ENTSOE_TOKEN"):
        return
    skip = pytest.mark.skip(reason="needs --run-network and ENTSOE_TOKEN")
    for item in items:
        if "network" in item.keywords:
            item.add_marker(skip)


class FakeResponse:
    def __init__(self, status_code, content=b""):
        self.status_code = status_code
        self.content = content


class FakeTransport:
    """Replays canned responses in order and records every query."""

    def __init__(self, *responses):
        self.responses = list(responses)
        self.calls = []

    def __call__(self, url, params):
        self.calls.append((url, dict(params)))
        response = self.responses.pop(0) if len(self.responses) > 1 else self.responses[0]
        if isinstance(response, Exception):
            raise response
        return response


@pytest.fixture
def fixture_bytes():
    def read(name):
        return (FIXTURES / name).read_bytes()
    return read


@pytest.fixture
def hourly_index():
    def build(days, start="2016-01-04"):
        return pd.date_range(start, periods=24 * days, freq="h", name="datetime")
    return build


def matrix(values, start="2016-01-04", names=None):
    """PointForecastMatrix over an hourly index starting at midnight."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values.reshape(-1, 1)
    index = pd.date_range(start, periods=values.shape[0], freq="h", name="datetime")
    names = names or tuple(f"f{j + 1}" for j in range(values.shape[1]))
    return PointForecastMatrix(index, names, values)
