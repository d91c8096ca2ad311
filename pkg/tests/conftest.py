import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from stablefreq.power_net import NetworkCase, bundled_case

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_case(B, p_m, M=None, D=None, u=1.0):
    B = np.asarray(B, dtype=float)
    n = B.shape[0]
    return NetworkCase(
        M=np.ones(n) if M is None else M,
        D=np.ones(n) if D is None else D,
        B=B,
        p_m=p_m,
        u_min=-u * np.ones(n),
        u_max=u * np.ones(n),
        base_freq=60.0,
    )


@pytest.fixture
def two_bus():
    return make_case([[0, 1], [1, 0]], [0.1, -0.1])


@pytest.fixture(scope="session")
def case3():
    return bundled_case("case3")


@pytest.fixture(scope="session")
def case39():
    return bundled_case("case39kron")


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
