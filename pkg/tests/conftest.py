import pytest

_key = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_key] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    results = item.config.stash[_key]
    failed = report.failed
    skipped = report.skipped and report.when in ("setup", "call")
    if report.when == "call" or failed or skipped:
        status = "FAIL" if failed else ("SKIP" if skipped else "PASS")
        detail = dict(item.user_properties).get("detail", "")
        prev = results.get(number)
        if prev is None or prev[1] == "PASS":
            results[number] = (title, status, detail)


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_key, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, status, detail = results[number]
        line = f"criterion {number:>2} {status}  {title}"
        if detail:
            line += f"  ({detail})"
        terminalreporter.write_line(line)
