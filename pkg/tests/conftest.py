import logging

import numpy as np
import pytest

from pproute import Session
from pproute.ring import FixedPointConfig

ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record(criterion: str, ok: bool, detail: str = "") -> None:
    ACCEPTANCE[criterion] = (bool(ok), detail)


@pytest.fixture(autouse=True)
def _restore_pkg_logger():
    # in-process cli.main() calls reconfigure the package logger
    lg = logging.getLogger("pproute")
    saved = (lg.level, lg.propagate, list(lg.handlers))
    yield
    lg.setLevel(saved[0])
    lg.propagate = saved[1]
    lg.handlers[:] = saved[2]


@pytest.fixture
def acceptance():
    return record


@pytest.fixture
def session():
    return Session(seed=1234, backend="circuit")


@pytest.fixture(params=["circuit", "dealer-oracle"])
def any_session(request):
    return Session(seed=99, backend=request.param)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


SMALL = FixedPointConfig(l=8, f=2, n_headroom=2)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda s: int(s.split()[0].rstrip("."))):
        ok, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
