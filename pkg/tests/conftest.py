import re

_ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_c(\d+)_(\w+)", report.nodeid)
    if not m or (report.when != "call" and report.passed):
        return
    n = int(m.group(1))
    if report.when == "call" or n not in _ACCEPTANCE:
        outcome = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        detail = dict(report.user_properties).get("detail", "")
        _ACCEPTANCE[n] = (outcome, m.group(2).replace("_", " "), detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        outcome, title, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"[{n}] {outcome}  {title}" + (f"  ({detail})" if detail else ""))
