"""Shared pytest hooks: a one-line pass/fail summary per acceptance check."""
import pytest

ACCEPT_OUTCOMES: dict[str, str] = {}
ACCEPT_DETAILS: dict[str, str] = {}


def record(test_name: str, detail: str) -> None:
    """Attach a measurement string to an acceptance test's summary line."""
    ACCEPT_DETAILS[test_name] = detail


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    out = yield
    rep = out.get_result()
    if rep.when == "call" and item.name.startswith("test_accept_"):
        ACCEPT_OUTCOMES[item.name] = rep.outcome


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPT_OUTCOMES:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name in sorted(ACCEPT_OUTCOMES):
        status = "PASS" if ACCEPT_OUTCOMES[name] == "passed" else "FAIL"
        label = name[len("test_accept_"):]
        detail = ACCEPT_DETAILS.get(name, "")
        line = f"{status}  {label}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)
