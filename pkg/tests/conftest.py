"""Roll-up reporting for the acceptance suite.

Tests marked @pytest.mark.criterion("...") are grouped by name and the
terminal summary prints one PASS/FAIL line per criterion, so a full run
ends with a human-readable scorecard.  Unmarked tests are unaffected.
"""


def pytest_configure(config):
    config.addinivalue_line(
        "markers",
        "criterion(name): roll this test into the named acceptance summary line",
    )


def pytest_collection_modifyitems(config, items):
    mapping = {}
    for item in items:
        marker = item.get_closest_marker("criterion")
        if marker:
            mapping[item.nodeid] = marker.args[0]
    config._criterion_by_nodeid = mapping


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    mapping = getattr(config, "_criterion_by_nodeid", {})
    if not mapping:
        return
    order = []
    outcomes = {}
    for name in mapping.values():
        if name not in outcomes:
            order.append(name)
            outcomes[name] = []
    for status in ("passed", "failed", "error", "skipped"):
        for report in terminalreporter.stats.get(status, []):
            name = mapping.get(getattr(report, "nodeid", None))
            if name is not None:
                outcomes[name].append(status)
    if not any(outcomes.values()):
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for name in order:
        statuses = outcomes[name]
        if not statuses:
            continue
        if any(s in ("failed", "error") for s in statuses):
            verdict = "FAIL"
        elif all(s == "skipped" for s in statuses):
            verdict = "SKIP"
        else:
            verdict = "PASS"
        terminalreporter.write_line(f"{verdict}  {name}")
