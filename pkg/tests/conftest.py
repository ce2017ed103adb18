"""Shared test plumbing: an acceptance-criterion registry whose entries are
printed one per line at the end of the run."""

CRITERION_RESULTS: list[tuple[str, bool, str]] = []


def record_criterion(name: str, ok: bool, detail: str) -> None:
    CRITERION_RESULTS.append((name, ok, detail))
    status = "PASS" if ok else "FAIL"
    print(f"[{name}] {status}: {detail}")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not CRITERION_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in CRITERION_RESULTS:
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[{name}] {status}: {detail}")
