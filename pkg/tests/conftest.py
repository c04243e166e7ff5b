"""Shared test plumbing: the acceptance-criterion line registry.

Acceptance tests call ``record_criterion`` before their asserts; the collected
PASS/FAIL lines are echoed once, in criterion order, after the run so the
verdict of every criterion is visible in one place.
"""

_LINES: list[tuple[int, str]] = []


def record_criterion(num: int, name: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    line = f"criterion {num:2d}: {status}  {name}"
    if detail:
        line += f"  [{detail}]"
    _LINES.append((num, line))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_LINES):
        terminalreporter.write_line(line)
