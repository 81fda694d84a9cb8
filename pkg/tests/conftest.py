import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from betel.dgp import example1_model, gen_example1
from betel.posterior import LogPosterior, StudentTPrior

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def ex1_data():
    return gen_example1(250, seed=11)


@pytest.fixture(scope="session")
def ex1_model(ex1_data):
    return example1_model(ex1_data, 5)


@pytest.fixture(scope="session")
def ex1_logpost(ex1_model):
    return LogPosterior(ex1_model, StudentTPrior.default(ex1_model.p))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ------------------------------------------------------ acceptance report ---

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line for an acceptance criterion and assert on it."""
    def _report(number: int, title: str, passed: bool, detail: str):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2} {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line, flush=True)
        assert passed, line
    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split()[0])):
            terminalreporter.write_line(line)
