"""Prints one PASS/FAIL/SKIP line per acceptance criterion at the end of the run."""


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "skipped", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if "test_acceptance.py::" not in getattr(rep, "nodeid", "") or rep.when not in ("call", "setup"):
                continue
            if rep.when == "setup" and outcome == "passed":
                continue
            props = dict(rep.user_properties)
            if "criterion" not in props:
                continue
            status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP", "error": "FAIL"}[outcome]
            detail = props.get("detail", "")
            if outcome == "skipped" and isinstance(rep.longrepr, tuple):
                detail = rep.longrepr[2]
            lines.append((props["criterion"], f"{status} criterion {props['criterion']:>2} "
                                              f"{props.get('title', '')}: {detail}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
