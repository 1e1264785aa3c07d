import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture
def record(request):
    """Log one PASS/FAIL line for an acceptance criterion and return the verdict."""
    lines = request.config.acceptance_lines

    def _record(criterion: str, title: str, ok: bool, detail: str = "") -> bool:
        line = f"criterion {criterion:<4} {'PASS' if ok else 'FAIL'}  {title}"
        if detail:
            line += f"  ({detail})"
        lines.append(line)
        print(line)
        return ok

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")

    def key(line):
        tag = line.split()[1]
        digits = "".join(ch for ch in tag if ch.isdigit())
        return int(digits), tag

    for line in sorted(lines, key=key):
        terminalreporter.write_line(line)
