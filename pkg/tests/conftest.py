import os
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("repo", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("repo")

os.environ.setdefault("DISTFORGE_THREADS", "1")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion at the end of the run
_acceptance = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _acceptance[report.nodeid] = report


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, rep in _acceptance.items():
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        detail = dict(rep.user_properties).get("detail", "")
        terminalreporter.write_line(f"{status}  {nodeid.split('::')[-1]}  {detail}")
