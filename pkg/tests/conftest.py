import os

# single-threaded BLAS keeps float reductions in a fixed order
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from mgaclap import data  # noqa: E402

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n, title): acceptance criterion n")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("acceptance")
    if mark is None or call.when not in ("setup", "call"):
        return
    n, title = mark.args
    entry = _ACCEPTANCE.setdefault(n, {"title": title, "ok": True, "detail": ""})
    if call.excinfo is not None:
        entry["ok"] = False
        entry["detail"] = call.excinfo.exconly().splitlines()[0][:160]
    for name, value in item.user_properties:
        if name == "detail":
            entry["detail"] = value


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        e = _ACCEPTANCE[n]
        line = f"criterion {n}: {'PASS' if e['ok'] else 'FAIL'}  {e['title']}"
        if e["detail"]:
            line += f"  [{e['detail']}]"
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus():
    m, c = data.gen_corpus(60, E=4, F_in=8, T=12, seed=5)
    return data.Corpus(m, c)


@pytest.fixture(scope="session")
def default_corpus():
    return data.Corpus(*data.gen_corpus(1250, seed=0))
