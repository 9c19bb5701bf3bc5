import json
from pathlib import Path

import numpy as np
import pytest

from onoffsa.experiments import build_scenario, load_config, solve_dp

FIXTURES = Path(__file__).parent / "fixtures"

# lines recorded by the acceptance module, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def k2_table():
    return np.array(json.loads((FIXTURES / "k2_table.json").read_text())["table"])


@pytest.fixture(scope="session")
def k2_scenario():
    return build_scenario(load_config(scenario="single_user_k2"))


@pytest.fixture(scope="session")
def k2_dp(k2_scenario):
    return solve_dp(k2_scenario)


@pytest.fixture(scope="session")
def k8_scenario():
    return build_scenario(load_config(scenario="single_user"))
