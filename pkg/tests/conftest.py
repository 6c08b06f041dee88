import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "repo", max_examples=40, deadline=None, derandomize=True,
    suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

ROOT = Path(__file__).resolve().parent.parent
TEST_DATA = Path(__file__).resolve().parent / "data"


def mnist_dir():
    env = os.environ.get("REVGN_DATA_DIR")
    if env and (Path(env) / "mnist").exists():
        return Path(env) / "mnist"
    return ROOT / "data" / "mnist"


@pytest.fixture(scope="session")
def mnist_path():
    path = mnist_dir()
    if not (path / "train-labels-idx1-ubyte.gz").exists() and not (
            path / "train-labels-idx1-ubyte").exists():
        pytest.skip(f"MNIST not found under {path}; run scripts/fetch_mnist.py")
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance verdict lines, echoed in the terminal summary so they survive capture
VERDICTS = {}


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[key])
