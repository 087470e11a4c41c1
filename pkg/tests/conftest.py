from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from ncopt import autodiff as ad

settings.register_profile("ci", max_examples=25, deadline=None)
settings.load_profile("ci")

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture
def f64():
    with ad.dtype_scope(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def named(data, name):
    return ad.Tensor(np.asarray(data, dtype=np.float64), True, name)


# acceptance criteria report one line each in the terminal summary
ACCEPTANCE: list[tuple[str, str, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key, status, detail in sorted(ACCEPTANCE, key=lambda r: int(r[0])):
        terminalreporter.write_line(f"criterion {key}: {status} - {detail}")
