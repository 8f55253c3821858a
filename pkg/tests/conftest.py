"""Collects acceptance outcomes and prints one verdict line per criterion at the end of the run."""

_VERDICTS = []


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        verdict = "PASS" if report.outcome == "passed" else "FAIL"
        _VERDICTS.append((props["criterion"], verdict, props.get("detail", "")))


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, verdict, detail in _VERDICTS:
        terminalreporter.write_line(f"criterion {criterion:<3} {verdict}  {detail}")
