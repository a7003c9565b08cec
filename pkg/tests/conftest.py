import numpy as np
import pytest

from formica import Scenario, Workspace, generate, preset


def make_scenario(robots, tasks, rewards, W=300.0, H=200.0, capacity=0.5, epsilon=0.5, seed=0):
    robots = np.asarray(robots, dtype=np.float64).reshape(-1, 2)
    return Scenario(
        workspace=Workspace(W, H),
        robot_pos=robots,
        capacity=np.broadcast_to(np.asarray(capacity, dtype=np.float64), (robots.shape[0],)).copy(),
        task_pos=np.asarray(tasks, dtype=np.float64).reshape(-1, 2),
        rewards=np.asarray(rewards, dtype=np.float64),
        epsilon=epsilon,
        seed=seed,
    )


@pytest.fixture
def training_scenario():
    return generate(preset("training", seed=7))


@pytest.fixture
def small_scenario():
    return generate(preset("small", seed=3))


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict = {}


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
