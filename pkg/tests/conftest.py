import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tfilter.partition import Domain, build_uniform_partition

settings.register_profile(
    "tfilter", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("tfilter")


@pytest.fixture
def line6():
    return build_uniform_partition(Domain([-6.0], [6.0]), [100])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CLAUSES = pytest.StashKey[dict]()


@pytest.fixture
def record(request):
    """Record one clause of an acceptance criterion: ``record("A2", ok, detail)``."""
    store = request.config.stash[_CLAUSES]

    def _record(criterion, ok, detail):
        store.setdefault(criterion, []).append((bool(ok), detail))
        print(f"{criterion} {'PASS' if ok else 'FAIL'}: {detail}")
        return ok

    return _record


def pytest_configure(config):
    config.stash[_CLAUSES] = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    clauses = config.stash.get(_CLAUSES, {})
    if not clauses:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(clauses):
        ok = all(c for c, _ in clauses[name])
        terminalreporter.write_line(f"{name} {'PASS' if ok else 'FAIL'}")
        for c, detail in clauses[name]:
            terminalreporter.write_line(f"    [{'ok' if c else 'x '}] {detail}")
