import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mudicho.evolution import LinearCocycle, NonlinearCocycle
from mudicho.sysdef.spec import load_spec

settings.register_profile(
    "properties",
    max_examples=200,
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("properties")


@pytest.fixture(scope="session")
def ex42():
    return load_spec("example42")


@pytest.fixture(scope="session")
def ex55():
    return load_spec("example55")


@pytest.fixture(scope="session")
def band_only():
    return load_spec("band_only")


@pytest.fixture(scope="session")
def lin42_512(ex42):
    return LinearCocycle.from_spec(ex42, 512)


@pytest.fixture(scope="session")
def cocycles42_64(ex42):
    lin = LinearCocycle.from_spec(ex42, 64)
    return lin, NonlinearCocycle.from_spec(ex42, 64, linear=lin)



# --- acceptance summary -----------------------------------------------------------------

_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """``criterion(label, ok, detail)`` records one acceptance line, then asserts ``ok``."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def check(label, ok, detail):
        lines.append(f"{label} {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, f"{label}: {detail}"

    return check


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[0][2:])):
            terminalreporter.write_line(line)
