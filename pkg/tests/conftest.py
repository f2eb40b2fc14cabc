import numpy as np
import pytest

from hydrolimit.velocity_space import build_grid


@pytest.fixture(scope="session")
def grid12():
    return build_grid(12, 6.0)


@pytest.fixture(scope="session")
def grid24():
    return build_grid(24, 6.0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, text = results[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d} {text}")
    terminalreporter.write_line(f"{sum(ok for ok, _ in results.values())}/{len(results)} criteria pass")
