from __future__ import annotations

import numpy as np
import pytest

from ewhbench.demand import FixtureModel, ScenarioSet, generate_demand, split_days
from ewhbench.ewh import EnvConfig, EwhParams, PriceSchedule

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def params():
    return EwhParams()


@pytest.fixture(scope="session")
def schedule():
    return PriceSchedule()


@pytest.fixture(scope="session")
def env():
    return EnvConfig()


@pytest.fixture(scope="session")
def month():
    """28 generated days (seed 1), the default experiment's dataset."""
    return generate_demand(FixtureModel.default(), 28, 1)


@pytest.fixture(scope="session")
def days(month):
    return split_days(month)


@pytest.fixture(scope="session")
def week_set(days):
    return ScenarioSet(tuple(days[14:21]))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
