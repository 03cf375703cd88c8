import numpy as np
import pytest

from robustseg import datagen
from robustseg.model import build_model


@pytest.fixture(scope="session")
def small_data():
    cfg = datagen.SceneConfig(h=16, w=16, train_size=24, val_size=12, seed=3)
    return datagen.generate(cfg)


@pytest.fixture
def model64():
    return build_model("A", 4, seed=11, dtype=np.float64)


def random_labels(rng, shape, k=4):
    return rng.integers(0, k, size=shape).astype(np.uint8)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)
