import numpy as np
import pytest

from robust_uda.core import Arch, init_model, rng_for


def central_diff(f, theta, h=1e-6):
    """Central finite-difference gradient of scalar ``f`` at ``theta``."""
    theta = np.array(theta, dtype=np.float64)
    g = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e.flat[i] = h
        g.flat[i] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


@pytest.fixture
def tiny_model():
    return init_model(Arch(3, (4,), 3, "tanh"), rng_for(0, "init"))


@pytest.fixture(scope="session")
def trained_moons():
    """A supervised two-moons model and its domain pair, trained once per session."""
    from robust_uda.data import gen_two_moons_shift
    from robust_uda.uda import MddConfig, pretrain_source

    pair = gen_two_moons_shift(1000, 0.0, 0.1, rng_for(0, "data"))
    cfg = MddConfig(eta=0.0, epochs=30, momentum=0.9)
    model, _ = pretrain_source(pair.source_x, pair.source_y, pair.target_x[:0], Arch(2, (32, 32), 2), cfg, 0)
    return model, pair


_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Collects one PASS/FAIL line per acceptance criterion."""

    def report(criterion, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
