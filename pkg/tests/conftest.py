import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from rhizograph.simulator import SimulationConfig, structured_sigma, simulate  # noqa: E402


@pytest.fixture(scope="session")
def field_design():
    """The field-sized design (4 treatments x 6 tubes) with unit latent variances."""
    data, truth = simulate(SimulationConfig(seed=123))
    return data, truth


@pytest.fixture(scope="session")
def structured_large():
    """500 tubes from the structured covariance at strength 0.3."""
    return simulate(SimulationConfig(tubes_per_treatment=125, sigma=structured_sigma(0.3), seed=7))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
