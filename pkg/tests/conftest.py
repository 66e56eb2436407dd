from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "repo", deadline=None, derandomize=True, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("repo")

# (criterion, passed, detail) rows collected by the acceptance tests
ACCEPTANCE: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


@pytest.fixture(scope="session")
def small_population():
    """Six procedural meshes (three subjects x two poses) with joints and truth."""
    from anthropometer.bodies import generate_body, generate_population

    pop = generate_population(3, seed=5)
    return [(e, *generate_body(e.params, e.seed)) for e in pop]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
