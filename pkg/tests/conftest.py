import numpy as np
import pytest

from phaseplane.geometry import validate_block_map


@pytest.fixture
def bht_map():
    return validate_block_map(1.0, 1.0, -2.0, K=1.0)


@pytest.fixture
def conformal_map():
    I = np.eye(2)
    return validate_block_map(I, I, -2 * I, K=1.0)


@pytest.fixture
def anisotropic_map():
    # K = 4 example: diag(2, 1/2) has ||.||^2 = 4, det = 1
    A = np.diag([2.0, 0.5])
    B = np.array([[1.0, 0.0], [0.0, 1.0]])
    return validate_block_map(A, B, -(A + B), K=4.0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
