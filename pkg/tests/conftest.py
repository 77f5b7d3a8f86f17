import functools

import numpy as np
import pytest

from xaimeter.datasets import gen_synthetic_dataset
from xaimeter.model import TrainConfig, toy_cnn, train

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE = []


def criterion(number, title):
    """Record PASS/FAIL for an acceptance test; the test's return value is shown as detail."""
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                detail = fn(*args, **kwargs)
            except BaseException as exc:
                msg = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
                ACCEPTANCE.append((number, f"criterion {number:2d}: FAIL  {title} -- {msg}"))
                raise
            extra = f" -- {detail}" if detail else ""
            ACCEPTANCE.append((number, f"criterion {number:2d}: PASS  {title}{extra}"))
        return wrapper
    return deco


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE):
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def train_set():
    return gen_synthetic_dataset(600, 32, 3, seed=1, name="train")


@pytest.fixture(scope="session")
def eval_set():
    return gen_synthetic_dataset(50, 32, 3, seed=7, name="eval")


@pytest.fixture(scope="session")
def toy_model(train_set):
    """The benchmark's toy CNN, trained with the default recipe."""
    result = train(toy_cnn(3, seed=0), train_set.images, train_set.labels, TrainConfig(seed=0))
    return result.classifier


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
