import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from capmatrix.synth import SynthScenario, generate

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def default_synth():
    """Default scenario: 40/40/40 cells, sigma 0.05."""
    return generate(SynthScenario())


@pytest.fixture(scope="session")
def small_synth():
    return generate(SynthScenario(n_train=15, n_primary_test=10, n_secondary_test=10, points_per_cycle=120, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
