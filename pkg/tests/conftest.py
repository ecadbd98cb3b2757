import numpy as np
import pytest

from usbone.phantom import PhantomConfig, generate

ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def small_phantom():
    return generate(PhantomConfig.scaled(32, frames=24, seed=3))


@pytest.fixture(scope="session")
def default_phantom_frames():
    # Default geometry, first frames only: generation cost grows with frame count.
    return generate(PhantomConfig(frames=256, seed=0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
