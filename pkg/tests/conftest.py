import os
import sys
import time

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from edge_placer.fixtures import drone_scenario, toy4  # noqa: E402

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def toy():
    return toy4()


@pytest.fixture(scope="session")
def drone():
    """(graph, application, {workload id: workload}) of the bundled scenario."""
    return drone_scenario()


@pytest.fixture(scope="session")
def trained(drone):
    """``trained(seed)`` -> TrainResult on the strictest drone workload, default config, cached per seed.

    ``trained.seconds[seed]`` holds the wall time of that training.
    """
    from edge_placer.harness import strictest
    from edge_placer.rlsp_agent import AgentConfig, train

    g, app, ws = drone
    cache = {}

    def get(seed: int = 0):
        if seed not in cache:
            t0 = time.perf_counter()
            cache[seed] = train(g, app, strictest(list(ws.values())), AgentConfig(), seed=seed)
            get.seconds[seed] = time.perf_counter() - t0
        return cache[seed]

    get.seconds = {}
    return get


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one acceptance line and fails the test when not ok."""

    def record(n: int, ok: bool, detail: str):
        ACCEPTANCE[n] = (bool(ok), detail)
        assert ok, f"criterion {n}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
