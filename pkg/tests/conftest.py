import os
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE = []


@pytest.fixture
def acceptance():
    """Record one pass/fail line for the acceptance summary."""

    def record(number, title, passed, detail=""):
        ACCEPTANCE.append((number, title, bool(passed), detail))

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number}. {title}: {detail}")


def mnist_dir():
    for root in (os.environ.get("LCNN_DATA_ROOT"), Path.home() / "data", "/root/data"):
        if root and (Path(root) / "mnist" / "train-images-idx3-ubyte").exists():
            return Path(root) / "mnist"
    return None


@pytest.fixture(scope="session")
def mnist_root():
    d = mnist_dir()
    if d is None:
        pytest.skip("MNIST IDX files not found under $LCNN_DATA_ROOT/mnist")
    return d
