import numpy as np
import pytest
from hypothesis import settings

from specdiff.dsp import MelFilterbank, StftConfig

settings.register_profile("repo", deadline=None, max_examples=40)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def cfg():
    return StftConfig(256, 64)


@pytest.fixture(scope="session")
def fb():
    return MelFilterbank.htk(16000, 256, 32)


# acceptance tests attach {"criterion": n, "title": ..., "detail": ...} via record_property;
# the summary prints one PASS/FAIL line per criterion
_criteria = {}


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    for key, info in report.user_properties:
        if key == "criterion":
            _criteria[info["criterion"]] = (report.outcome, info)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        outcome, info = _criteria[n]
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"[{verdict}] {n}. {info['title']}: {info.get('detail', '')}")
