"""Collects acceptance-criterion outcomes and prints one verdict line per criterion."""

from collections import defaultdict

_TITLES: dict[int, str] = {}
_NODE_CRITERION: dict[str, int] = {}
_OUTCOMES: dict[int, list[bool]] = defaultdict(list)


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            number = mark.args[0]
            _NODE_CRITERION[item.nodeid] = number
            if len(mark.args) > 1:
                _TITLES.setdefault(number, mark.args[1])


def pytest_runtest_logreport(report):
    number = _NODE_CRITERION.get(report.nodeid)
    if number is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _OUTCOMES[number].append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_OUTCOMES):
        verdict = "PASS" if all(_OUTCOMES[number]) else "FAIL"
        terminalreporter.write_line(f"criterion {number:>2}: {verdict}  {_TITLES.get(number, '')}")
