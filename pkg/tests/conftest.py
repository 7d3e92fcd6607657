import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from hypergen import autodiff as ad

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

ROOT = Path(__file__).resolve().parents[1]


@pytest.fixture
def f64():
    with ad.precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def mnist_dir() -> Path:
    return Path(os.environ.get("HYPERGEN_MNIST_DIR", ROOT / "data" / "mnist"))


def have_mnist() -> bool:
    return (mnist_dir() / "train-images-idx3-ubyte").exists() or (mnist_dir() / "train-images-idx3-ubyte.gz").exists()


_CRITERIA = {}


@pytest.fixture(scope="session")
def criterion_report():
    """Record ``(number, passed, detail)`` for the acceptance summary."""
    def record(number: int, passed: bool, detail: str) -> bool:
        _CRITERIA[number] = (bool(passed), detail)
        return bool(passed)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
