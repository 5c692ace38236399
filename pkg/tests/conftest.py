import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from groupoid_heat import build_model

settings.register_profile("default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

CRITERIA = {}


def record_criterion(number, ok, detail):
    CRITERIA[number] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def parabolic():
    return build_model("parabolic-circle")


@pytest.fixture(scope="session")
def flat_parabolic():
    return build_model("parabolic-circle", h_amp=0.0)


@pytest.fixture(scope="session")
def sphere():
    return build_model("stereo-sphere")


@pytest.fixture(scope="session")
def cylinder():
    return build_model("cylinder-product")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
