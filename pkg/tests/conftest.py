import time
from contextlib import contextmanager

import pytest

_RESULTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_RESULTS] = []


@pytest.fixture
def criterion(request):
    """Context manager recording one acceptance line: number, title, PASS/FAIL, detail, time."""
    results = request.config.stash[_RESULTS]

    @contextmanager
    def run(number: int, title: str):
        detail: dict = {}
        start = time.perf_counter()
        try:
            yield detail
        except BaseException as exc:
            detail.setdefault("error", f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}")
            results.append((number, title, False, detail, time.perf_counter() - start))
            raise
        results.append((number, title, True, detail, time.perf_counter() - start))

    return run


def pytest_terminal_summary(terminalreporter, config):
    results = sorted(config.stash[_RESULTS], key=lambda r: r[0])
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail, seconds in results:
        info = "  ".join(f"{k}={v}" for k, v in detail.items())
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {number:2d}. {title:<34} {seconds:7.1f}s  {info}")


@pytest.fixture(scope="session")
def desk_run():
    """The calibrated desk-scale training run, shared by every test that needs a trained model."""
    from dimsum.config import DESK_RUN, from_dict
    from dimsum.pipeline import train_run

    cfg = from_dict(DESK_RUN)
    return cfg, train_run(cfg)
