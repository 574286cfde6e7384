import numpy as np
import pytest

from clothslide import learn
from clothslide.affordance import SimEnv, make_scene
from clothslide.cloth import ClothParams, make_configuration


@pytest.fixture(scope="session")
def params():
    return ClothParams()


@pytest.fixture(scope="session")
def hanging(params):
    return make_configuration(params, seed=3)


@pytest.fixture(scope="session")
def scene():
    return make_scene(SimEnv(), 3, 0.0)


@pytest.fixture(scope="session")
def classifier():
    # Small but accurate enough for grasp labels in unit tests.
    return learn.train_default_classifier(n_per_category=40, n_aug=3, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config.acceptance_lines = {}


def pytest_terminal_summary(terminalreporter, config):
    lines = config.acceptance_lines
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])


@pytest.fixture
def verdict(request):
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.acceptance_lines[n] = line
        print(line)
        return ok

    return record
