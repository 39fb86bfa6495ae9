import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def central_difference(fun, theta, step=1e-5):
    """Central finite differences of a scalar function, one coordinate at a time."""
    out = np.empty_like(theta)
    for k in range(theta.size):
        e = np.zeros_like(theta)
        e[k] = step
        out[k] = (fun(theta + e) - fun(theta - e)) / (2 * step)
    return out


def assert_grad_close(analytic, numeric, rel=1e-5, abs_=1e-8):
    err = np.abs(analytic - numeric)
    bound = rel * np.maximum(np.abs(numeric), np.abs(analytic)) + abs_
    worst = int(np.argmax(err - bound))
    assert np.all(err <= bound), f"coordinate {worst}: {analytic[worst]} vs {numeric[worst]}"


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: dict = {}


def report(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
