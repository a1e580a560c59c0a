"""Per-criterion pass/fail summary for the acceptance suite."""
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

CRITERIA = {
    1: "numeric oracles",
    2: "finite-difference gradients",
    3: "shapes and architecture",
    4: "loss identities",
    5: "training mechanics",
    6: "smoke experiment",
    7: "persistence",
    8: "data",
}

_outcomes: dict[int, list[tuple[str, str, list[str]]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        details = [str(v) for k, v in item.user_properties if k == "detail"]
        _outcomes.setdefault(marker.args[0], []).append((item.name, report.outcome, details))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, title in CRITERIA.items():
        results = _outcomes.get(n)
        if not results:
            tr.write_line(f"criterion {n} ({title}): NOT RUN")
            continue
        failed = [name for name, outcome, _ in results if outcome != "passed"]
        status = "PASS" if not failed else "FAIL"
        details = "; ".join(d for _, _, ds in results for d in ds)
        line = f"criterion {n} ({title}): {status} [{len(results) - len(failed)}/{len(results)} checks]"
        if failed:
            line += " failed: " + ", ".join(failed)
        if details:
            line += " | " + details
        tr.write_line(line)
