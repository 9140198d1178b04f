from __future__ import annotations

import warnings

import pytest

from aptmcl.features import SensitivityConfig
from aptmcl.provenance import build_graph
from aptmcl.synth import ScenarioSpec, default_sensitivity, generate_scenario

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(autouse=True)
def _quiet_cotrain_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield


@pytest.fixture(scope="session")
def sensitivity() -> SensitivityConfig:
    return default_sensitivity()


@pytest.fixture(scope="session")
def small_scenario():
    """A 300-process mixed scenario: (events, labels, graph)."""
    events, labels = generate_scenario(ScenarioSpec(n_processes=300, rng_seed=11))
    return events, labels, build_graph(events)
