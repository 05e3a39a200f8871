import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains or samples a model (minutes)")
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria")


CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record the outcome of an acceptance criterion for the end-of-run summary."""

    def record(number: int, ok: bool, detail: str) -> bool:
        prev = CRITERIA.get(number)
        # a criterion spread over several tests passes only if all parts pass
        if prev is not None:
            ok, detail = ok and prev[0], f"{prev[1]}; {detail}"
        CRITERIA[number] = (bool(ok), detail)
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        ok, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
