import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("repro", deadline=None, derandomize=True, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repro")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_synth():
    from adageo.geodata import SynthConfig
    return SynthConfig(places=24, image_size=16, domains=("night", "snow"))


@pytest.fixture(scope="session")
def tiny_dataset(tiny_synth):
    from adageo.geodata import render_dataset
    return render_dataset(tiny_synth, 0)


# ---------------------------------------------------------------- acceptance summary

_CRITERIA = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if "test_acceptance.py" not in report.nodeid or not name.startswith("test_c"):
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(report.user_properties).get("summary", "")
        _CRITERIA[name] = (report.outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA):
        outcome, detail = _CRITERIA[name]
        num = int(name[6:8])
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {num:2d} {verdict}  {name[9:]}: {detail}")
