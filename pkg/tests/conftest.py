import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def host8(monkeypatch):
    # the sandbox host may have a single CPU; LOCAL tests use 8 virtual cores
    monkeypatch.setenv("PILOTFARM_HOST_CORES", "8")
    return 8


def pytest_configure(config):
    os.environ.setdefault("MPLBACKEND", "Agg")


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
