import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dvdp.cascade import EXPLICIT, build_cascade
from dvdp.mixture import GaussianMixture
from dvdp.schedule import build_schedule, schedule_for

settings.register_profile(
    "dvdp", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("dvdp")

# filled by tests/test_acceptance.py, printed after the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, msg = ACCEPTANCE[num]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {num}: {msg}")


@pytest.fixture(scope="session")
def two_blob():
    """The two-component planar mixture used by the end-to-end checks."""
    return GaussianMixture.isotropic([0.4, 0.6], [[2.0, 0.5], [-1.0, -1.5]], [0.3, 0.5])


@pytest.fixture(scope="session")
def flat2():
    c = build_cascade((2,), 1, EXPLICIT)
    return c, schedule_for(c, 1000, (500,))


@pytest.fixture(scope="session")
def default_schedule():
    return build_schedule()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
