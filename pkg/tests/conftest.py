import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dyndetect.dynamics import DynamicsTable, LabeledDataset  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_dataset():
    rng = np.random.default_rng(0)
    labels = np.repeat(np.arange(5), 40)
    return LabeledDataset(rng.standard_normal((200, 3)), labels, 5)


@pytest.fixture
def flagged_table():
    values = np.array(
        [
            [0.1, 0.25, 0.5, 0.75],
            [0.9, 0.8, 0.7, 0.6],
            [0.333333, 0.0, 1.0, 0.5],
        ]
    )
    return DynamicsTable(values, labels=[0, 2, 1], true_labels=[0, 1, 1], flags=[0, 1, 0], metadata={"num_classes": 3, "seed": 4})


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
