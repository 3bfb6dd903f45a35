import os
from pathlib import Path

import pytest

from nslnet.data.idx import load_mnist

MNIST_DIR = Path(os.environ.get("NSL_MNIST_DIR", "/root/data/mnist"))


@pytest.fixture(scope="session")
def mnist_test():
    try:
        return load_mnist(MNIST_DIR, "test")
    except FileNotFoundError:
        pytest.skip(f"MNIST not found in {MNIST_DIR} (set NSL_MNIST_DIR)")


BACKGROUNDS_DIR = os.environ.get("NSL_BACKGROUNDS_DIR")

_ACCEPTANCE = []


class AcceptanceLog:
    """Collects one verdict line per criterion and fails the calling test on a miss."""

    def record(self, number, ok: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        assert ok, line

    def note(self, number, detail: str) -> None:
        line = f"criterion {number}: INFO | {detail}"
        _ACCEPTANCE.append(line)
        print(line)


@pytest.fixture(scope="session")
def acceptance():
    return AcceptanceLog()


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
