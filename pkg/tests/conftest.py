import pytest

_CRITERIA: list[tuple[int, str, str, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    failed_setup = rep.when == "setup" and not rep.passed
    if rep.when == "call" or failed_setup:
        num, title = mark.args
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        _CRITERIA.append((num, title, "PASS" if rep.passed else "FAIL", detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, status, detail in sorted(_CRITERIA):
        line = f"[{status}] criterion {num}: {title}"
        terminalreporter.write_line(line + (f" -- {detail}" if detail else ""))
