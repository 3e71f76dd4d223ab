import pytest
from hypothesis import HealthCheck, settings

from robocascade.kinematics import preset
from robocascade.scene import GeneratorConfig, generate_dataset

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small ur5like corpus at 64x53 shared by the module tests."""
    out = tmp_path_factory.mktemp("tiny") / "data"
    cfg = GeneratorConfig(robot="ur5like", counts=[12, 18], seed=3, width=64, height=53)
    manifest = generate_dataset(cfg, preset("ur5like"), out)
    return out, manifest


# --- acceptance reporting ----------------------------------------------------

VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")
    config.stash[VERDICTS] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (report.when == "call" or (report.when == "setup" and report.failed)):
        return
    number, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    verdict = "PASS" if report.passed else "FAIL"
    line = f"criterion {number} {verdict}: {title}" + (f" [{detail}]" if detail else "")
    item.config.stash[VERDICTS].append(line)


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
