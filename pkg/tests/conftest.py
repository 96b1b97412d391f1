import os
from pathlib import Path

import pytest

ACCEPTANCE = {}

TOY_SEEDS = (0, 1, 2)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: runs the toy training experiment (tens of minutes on CPU)")
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.fixture(scope="session")
def toy_results(tmp_path_factory):
    """Three-seed toy experiment shared by the trend checks.

    Set COLLABWM_TOY_DIR to keep the runs (and reuse them on the next invocation).
    """
    from collabwm.toy import ToySettings, run_seed
    root = os.environ.get("COLLABWM_TOY_DIR")
    root = Path(root) if root else tmp_path_factory.mktemp("toy")
    return [run_seed(seed, root, ToySettings()) for seed in TOY_SEEDS]


@pytest.fixture
def record(request):
    """Attach a one-line detail string to the current acceptance test."""
    def _record(detail):
        request.node.user_properties.append(("detail", detail))
    return _record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        detail = "; ".join(v for k, v in item.user_properties if k == "detail")
        ACCEPTANCE[marker.args[0]] = (report.passed, detail, report.duration)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail, secs = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({secs:.1f} s) {detail}")
