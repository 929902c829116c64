import numpy as np
import pytest
import torch

from asda.synth import generate_dataset

torch.set_default_dtype(torch.float64)


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_dataset(seed=3, n_instances=6, views_per_instance=3, image_size=32)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
