import numpy as np
import pytest

from spinedit import load_spin_system
from spinedit.spinsys import bundled_systems


@pytest.fixture(scope="session")
def citrate():
    return load_spin_system("citrate")


@pytest.fixture(scope="session")
def glutamine():
    return load_spin_system("glutamine")


@pytest.fixture(scope="session")
def all_systems():
    return {name: load_spin_system(name) for name in bundled_systems()}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_hermitian(rng, d, scale=1.0):
    a = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    return scale * (a + a.conj().T) / 2


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
