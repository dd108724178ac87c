import sys
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from facecode.model import generate_synthetic_basis  # noqa: E402
from facecode.render import Camera  # noqa: E402

_acceptance = {}


@pytest.fixture(scope="session")
def basis():
    return generate_synthetic_basis(3, 500)


@pytest.fixture(scope="session")
def basis1k():
    return generate_synthetic_basis(0, 1000)


@pytest.fixture(scope="session")
def camera():
    return Camera(224, 224)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def frame(image, landmarks):
    return SimpleNamespace(image=image, landmarks=landmarks)


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    for key, value in report.user_properties:
        if key == "criterion":
            # a criterion with several tests passes only if all of them do
            if _acceptance.get(value, "passed") == "passed":
                _acceptance[value] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_acceptance):
        terminalreporter.write_line(f"{name:<44} {'PASS' if _acceptance[name] == 'passed' else 'FAIL'}")
