import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ctclip import tensor as T

settings.register_profile("ctclip", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ctclip")


@pytest.fixture(autouse=True)
def finite_guard():
    """Every forward op must stay finite on finite inputs while tests run."""
    prev = T.set_check_finite(True)
    yield
    T.set_check_finite(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(rng, *shape):
    return T.Tensor(rng.normal(size=shape), requires_grad=True)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    if module is None or not module.VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(module.VERDICTS):
        terminalreporter.write_line(module.VERDICTS[n])
