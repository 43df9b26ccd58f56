import numpy as np
import pytest

from contact_inekf.lie import GroupElement, so3_exp


def expm_series(M, terms=30):
    """Truncated power series of the matrix exponential (test oracle)."""
    M = np.asarray(M, dtype=float)
    out = np.eye(M.shape[0])
    term = np.eye(M.shape[0])
    for k in range(1, terms + 1):
        term = term @ M / k
        out = out + term
    return out


def random_rotation(rng, max_angle=np.pi):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return so3_exp(axis * rng.uniform(0.0, max_angle))


def random_element(rng, K, scale=2.0):
    return GroupElement(random_rotation(rng), rng.normal(scale=scale, size=(3, K)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance verdicts, printed in the terminal summary even when output is captured
VERDICTS: list = []


@pytest.fixture
def verdict():
    def record(number: int, name: str, ok: bool, detail: str):
        line = f"criterion {number} {name}: {'PASS' if ok else 'FAIL'} ({detail})"
        VERDICTS.append((number, line))
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(VERDICTS):
            terminalreporter.write_line(line)
