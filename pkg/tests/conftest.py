import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from vrfb_topopt.config import CaseConfig
from vrfb_topopt.geometry import build_grid

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_config():
    return CaseConfig(nx=10, ny=10, nz_channel=2, nz_electrode=3)


@pytest.fixture(scope="session")
def small_grid(small_config):
    return build_grid(small_config)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary ----------------------------------------------------------------
# tests named test_criterion_<n>_... report one PASS/FAIL line each at the end of the run

_criteria = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_criterion_"):
        return
    if report.when == "call" or report.failed or report.skipped:
        number = int(name.split("_")[2])
        detail = dict(report.user_properties).get("detail", "")
        if number not in _criteria or report.failed:
            _criteria[number] = (name, report.outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_criteria):
        name, outcome, detail = _criteria[number]
        verdict = {"passed": "PASS", "skipped": "SKIP"}.get(outcome, "FAIL")
        line = f"criterion {number}: {verdict}  {name}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
