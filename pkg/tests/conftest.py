import numpy as np
import pytest

from trafficrl import scenario as sc


@pytest.fixture(scope="session")
def nominal_specs():
    return [sc.sample_nominal_scenario(s, n_agents=(2, 4)) for s in range(4)]


@pytest.fixture(scope="session")
def longtail_specs():
    return [sc.sample_concrete_scenario(sc.default_logical(f), 10 + k)
            for k, f in enumerate(("cut_in", "hard_brake", "merge", "cut_in"))]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    results = getattr(sys.modules.get("test_acceptance"), "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
