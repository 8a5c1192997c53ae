import numpy as np
import pytest

from voxcodec.field import FeatureGrid, FieldFrame

UNIT_BOX = np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_frame(rng, coeff=(4, 4, 4), bases=((4, 4, 4), (3, 3, 3)), channels=3, scale=1.0,
                 aabb=UNIT_BOX, qsteps=None):
    grids = [FeatureGrid(rng.uniform(-scale, scale, (*d, channels)), aabb) for d in (coeff, *bases)]
    q = np.full(len(grids), 0.05) if qsteps is None else qsteps
    return FieldFrame(grids[0], grids[1:], q)


def central_difference(f, x, index, h=1e-4):
    """Central difference of scalar ``f`` w.r.t. ``x[index]`` (``x`` is modified in place and restored)."""
    old = x[index]
    x[index] = old + h
    up = f()
    x[index] = old - h
    down = f()
    x[index] = old
    return (up - down) / (2 * h)


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
