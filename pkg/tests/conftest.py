"""Shared fixtures: scenario runs are expensive enough to cache per session."""

from __future__ import annotations

import pytest

from bftkit import pbft
from bftkit.checks import check_run
from bftkit.harness import (
    common_scenario,
    scenario_drop_commits,
    scenario_silent_leaders,
    scenario_split_prepares,
    scenario_wrong_value,
)
from bftkit.simnet import run_scenario


@pytest.fixture(scope="session")
def common_runs():
    """10 seeded all-honest trials for each f in {1, 2, 3}: (scenario, result)."""
    runs = []
    for f in (1, 2, 3):
        for k in range(10):
            sc = common_scenario(f, 1000 + k)
            runs.append((sc, run_scenario(sc)))
    return runs


@pytest.fixture(scope="session")
def failure_runs():
    """The four failure-scenario runs at f=2: (scenario, expected view, latency target)."""
    out = []
    sc = scenario_drop_commits(2, 0)
    out.append((sc, run_scenario(sc), 1, 2000))
    sc = scenario_wrong_value(2, 1)
    out.append((sc, run_scenario(sc), 0, None))
    sc = scenario_silent_leaders(2, 1, 2)
    out.append((sc, run_scenario(sc), 2, 4000))
    sc = scenario_silent_leaders(2, 2, 3)
    out.append((sc, run_scenario(sc), 3, 8000))
    return out


@pytest.fixture(scope="session")
def all_reports(common_runs, failure_runs):
    """Checker reports for every cached run."""
    reports = []
    for sc, res in common_runs:
        reports.append((sc, res, check_run(res)))
    for sc, res, _, _ in failure_runs:
        reports.append((sc, res, check_run(res)))
    return reports


@pytest.fixture(scope="session")
def split_prepare_run():
    sc = scenario_split_prepares(7)
    return sc, run_scenario(sc)


@pytest.fixture()
def cfg1():
    return pbft.PbftConfig(f=1)


@pytest.fixture()
def cfg2():
    return pbft.PbftConfig(f=2)
