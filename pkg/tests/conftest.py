import numpy as np
import pytest

from netshield.abr import AbrConfig
from netshield.lb import LbConfig


@pytest.fixture
def abr_cfg():
    return AbrConfig()


@pytest.fixture
def lb_cfg():
    return LbConfig()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---- acceptance criterion reporting ------------------------------------------

_CRITERIA: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        detail = dict(item.user_properties).get("detail", "")
        if report.failed and not detail:
            detail = str(call.excinfo.value).splitlines()[0] if call.excinfo else "error"
        # parametrized cases of one criterion are merged into a single line
        ok, parts, dur = _CRITERIA.get(marker.args[0], (True, [], 0.0))
        _CRITERIA[marker.args[0]] = (ok and report.passed, parts + [detail], dur + report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_CRITERIA, key=lambda c: int(c[1:])):
        ok, parts, dur = _CRITERIA[cid]
        terminalreporter.write_line(f"{cid} {'PASS' if ok else 'FAIL'} ({dur:.1f}s) {'; '.join(parts)}")
