import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pairrank.data import generate_starmen, generate_tumor, split_subjects
from pairrank.model import BackboneConfig, init_weights

settings.register_profile(
    "repo",
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_config():
    return BackboneConfig.preset("tiny")


@pytest.fixture
def tiny_model(tiny_config):
    return init_weights(tiny_config, seed=0)


@pytest.fixture(scope="session")
def small_starmen():
    """10 subjects x 4 visits at 32 px, split 6/2/2."""
    return split_subjects(generate_starmen(10, 4, 32, seed=5), seed=0)


@pytest.fixture(scope="session")
def small_tumor():
    return split_subjects(generate_tumor(10, 32, seed=5), seed=0)


@pytest.fixture
def lite32():
    return init_weights(BackboneConfig.preset("lite", input_size=32), seed=0)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 10):
        if n not in results:
            terminalreporter.write_line(f"criterion {n}: NOT RUN / ERROR")
            continue
        passed, detail = results[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}")
