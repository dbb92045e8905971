"""One PASS/FAIL line per acceptance criterion at the end of the run.

Acceptance tests carry ``@pytest.mark.criterion(n, "title")`` and may add
a ``detail`` user property with the measured numbers.
"""

import pytest

_RESULTS: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    n, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    entry = _RESULTS.setdefault(n, [title, True, []])
    entry[1] = entry[1] and report.passed
    if detail:
        entry[2].append(detail)
    if not report.passed and report.longrepr is not None:
        entry[2].append(str(getattr(report.longrepr, "reprcrash", None) and
                            report.longrepr.reprcrash.message or "error").splitlines()[0])


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        title, ok, details = _RESULTS[n]
        line = f"[{'PASS' if ok else 'FAIL'}] {n}. {title}"
        if details:
            line += " | " + "; ".join(details)
        terminalreporter.write_line(line)
