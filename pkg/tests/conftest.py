import numpy as np
import pytest

from spatial_deconfounder.dataset import from_arrays


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_dataset(ny=6, nx=7, d_x=2, seed=0, validity=None):
    """Small random dataset with binary treatment and real covariates and outcome."""
    r = np.random.default_rng(seed)
    A = (r.random((ny, nx)) < 0.5).astype(int)
    X = r.standard_normal((ny, nx, d_x))
    Y = r.standard_normal((ny, nx))
    return from_arrays(A, Y, X, validity=validity)


# Acceptance outcomes, filled by test_acceptance.py and printed after the run.
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> bool:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
