import numpy as np
import pytest

from affuse.data import SynthConfig, generate_synthetic


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar ``f()`` with respect to array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(1e-6, np.max(np.abs(a)), np.max(np.abs(b))))


@pytest.fixture(scope="session")
def small_records():
    return generate_synthetic(SynthConfig(n_students=12, activities_per_student=2, T_range=(3, 6), seed=3))


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE = []


def record_criterion(name, passed, detail=""):
    ACCEPTANCE.append((name, bool(passed), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
