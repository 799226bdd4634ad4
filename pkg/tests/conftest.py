import numpy as np
import pytest
import torch

from mvconsist.scenegen import random_sample


@pytest.fixture(scope="session")
def sample():
    return random_sample(3, size=32, n_frames=4)


@pytest.fixture(scope="session")
def sample64():
    return random_sample(1000)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from report import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(LINES):
            terminalreporter.write_line(LINES[k])
