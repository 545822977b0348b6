import functools

import pytest

from flue.coding import build_cluster, build_cluster_pool

# acceptance outcomes, printed as one line per criterion at the end of the session
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")


@functools.lru_cache(maxsize=None)
def cached_cluster(n, seed):
    return build_cluster(n, seed)


@functools.lru_cache(maxsize=None)
def cached_pool(n, seed, size):
    return tuple(build_cluster_pool(n, seed, size))


@pytest.fixture
def cluster2():
    return cached_cluster(2, 0)


@pytest.fixture
def cluster3():
    return cached_cluster(3, 0)
