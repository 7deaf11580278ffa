import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_VERDICTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")
    config.stash[_VERDICTS] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker.args
    entry = item.config.stash[_VERDICTS].setdefault(number, {"title": title, "ok": True, "notes": []})
    entry["ok"] &= report.passed
    entry["notes"] += [v for k, v in item.user_properties if k == "measured"]


def pytest_terminal_summary(terminalreporter, config):
    verdicts = config.stash.get(_VERDICTS, {})
    if not verdicts:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(verdicts):
        v = verdicts[number]
        line = f"[{'PASS' if v['ok'] else 'FAIL'}] criterion {number}: {v['title']}"
        if v["notes"]:
            line += " | " + "; ".join(dict.fromkeys(v["notes"]))
        terminalreporter.write_line(line)
