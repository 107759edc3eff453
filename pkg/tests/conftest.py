import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_criteria: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when != "call" and not (call.when == "setup" and call.excinfo):
        return
    _criteria.setdefault(mark.args[0], []).append("FAIL" if call.excinfo else "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        outcomes = _criteria[n]
        verdict = "PASS" if all(o == "PASS" for o in outcomes) else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d}: {verdict} ({outcomes.count('PASS')}/{len(outcomes)} checks)")
