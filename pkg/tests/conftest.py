"""Shared pytest config: one PASS/FAIL line per acceptance criterion."""

import re

_config = None
_ACCEPTANCE = re.compile(r"test_acceptance\.py::test_(c\d{2})")


def pytest_configure(config):
    global _config
    _config = config


def pytest_runtest_logreport(report):
    match = _ACCEPTANCE.search(report.nodeid)
    if not match or _config is None:
        return
    # the reporter registers after conftest configure, so look it up lazily
    terminal = _config.pluginmanager.getplugin("terminalreporter")
    if terminal is None:
        return
    label = match.group(1).upper()
    if report.when == "call":
        terminal.write_line(f"[acceptance] {label} {'PASS' if report.passed else 'FAIL'}")
    elif report.failed:
        # setup or teardown error counts as a failed criterion
        terminal.write_line(f"[acceptance] {label} FAIL")
