from __future__ import annotations

from hypothesis import HealthCheck, settings

settings.register_profile("edsc", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("edsc")

# acceptance verdicts, echoed after the run so they survive output capture
VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS):
            terminalreporter.write_line(line)
