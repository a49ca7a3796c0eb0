from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import pytest

HERE = Path(__file__).resolve().parent
sys.path.insert(0, str(HERE))

FIXTURES = HERE / "fixtures"


@pytest.fixture(scope="session")
def gamma_fixture():
    with open(FIXTURES / "gamma_oracle.json") as fh:
        return json.load(fh)


@pytest.fixture(scope="session")
def calibration():
    from ma_sharp.entire_scheme import load_calibration

    return load_calibration()


def pytest_addoption(parser):
    parser.addoption(
        "--run-slow",
        action="store_true",
        default=False,
        help="run the long acceptance-grade checks",
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow") or os.environ.get("MA_SHARP_RUN_SLOW"):
        return
    skip = pytest.mark.skip(reason="needs --run-slow (or MA_SHARP_RUN_SLOW=1)")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)
