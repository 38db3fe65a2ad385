import os
import sys
import warnings

import pytest

sys.path.insert(0, os.path.dirname(__file__))


@pytest.fixture(autouse=True)
def _quiet_solver_warnings():
    from flowtrend.admm import AdmmWarning
    from flowtrend.pisolver import PiWarning
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", AdmmWarning)
        warnings.simplefilter("ignore", PiWarning)
        yield


_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid or report.when != "call":
        return
    props = dict(report.user_properties)
    if "criterion" in props:
        _ACCEPTANCE[props["criterion"]] = (report.outcome, props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        outcome, detail = _ACCEPTANCE[n]
        word = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line("criterion %2d: %s  %s" % (n, word, detail))
