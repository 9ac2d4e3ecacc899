"""Surface the acceptance verdict lines in the terminal summary.

pytest captures per-test stdout, so the one-line ``ACCEPT n ...`` verdicts
printed by tests/test_acceptance.py would otherwise only be visible on
failure.  This hook echoes them after the test session so a plain
``pytest -v`` run always shows one PASS/FAIL line per acceptance check.
"""


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    try:
        import test_acceptance
    except ImportError:
        return
    lines = getattr(test_acceptance, "VERDICT_LINES", [])
    if not lines:
        return
    terminalreporter.section("acceptance verdicts")
    for line in sorted(lines):
        terminalreporter.write_line(line)
