import numpy as np
import pytest

from evgnn import event_io
from evgnn.model import random_model


@pytest.fixture(scope="session")
def small_stream():
    return event_io.gen_synthetic(
        "uniform_random",
        {"width": 64, "height": 48, "count": 600, "duration_us": 20_000},
        seed=5)


@pytest.fixture(scope="session")
def small_model():
    return random_model(seed=9)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
