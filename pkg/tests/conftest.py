import re

import pytest

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = re.match(r"test_criterion_(\d+)_(\w+)", item.name)
    if m and (rep.when == "call" or rep.failed):
        dur = getattr(rep, "duration", 0.0)
        prev = _CRITERIA.get(int(m.group(1)))
        passed = rep.passed and (prev is None or prev[1])
        _CRITERIA[int(m.group(1))] = (m.group(2).replace("_", " "), passed, dur if rep.when == "call" else prev[2]
                                      if prev else dur)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        name, passed, dur = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if passed else 'FAIL'}  {name} ({dur:.2f}s)")
