import os
from functools import lru_cache

import pytest

from pinning.capacity import BallFamily
from pinning.geometry import DefectProfile

JOBS = int(os.environ.get("PINNING_JOBS", min(8, os.cpu_count() or 1)))

_RESULTS: list[tuple[str, bool, str]] = []


def record(name: str, ok: bool, detail: str = "") -> None:
    """Log an acceptance verdict and fail the calling test if it is negative."""
    _RESULTS.append((name, bool(ok), detail))
    assert ok, f"{name}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")


@lru_cache(maxsize=None)
def ball_family(sigma: float) -> BallFamily:
    return BallFamily(DefectProfile(2, sigma), jobs=JOBS)


@pytest.fixture(scope="session")
def jobs():
    return JOBS
