import pytest

# One line per acceptance criterion, in the order they finished.
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict(request):
    """Record a PASS/FAIL line for an acceptance criterion.

    Call ``verdict(n, ok, detail)``; the line is printed at once and again in
    the terminal summary, so it shows up with or without ``-s``.
    """
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def record(n: int, ok: bool, detail: str) -> None:
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        with capman.global_and_fixture_disabled():
            print("\n" + line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
