import shutil
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from buildmend.ciconfig import emit_reconstruction, parse_ci_spec, select_build_stage
from buildmend.classify import classify, infer_build_phase
from buildmend.core import RawLog
from buildmend.logparse import parse_log

import gitfixtures

_criteria: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): a primary acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _criteria[number] = ("PASS" if report.passed else "FAIL", title)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        verdict, title = _criteria[number]
        terminalreporter.write_line(f"{verdict} criterion {number}: {title}")


settings.register_profile("repo", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

needs_toolchain = pytest.mark.skipif(
    not (shutil.which("cmake") and shutil.which("ninja") and shutil.which("gcc")),
    reason="cmake, ninja and gcc are required for real builds",
)


@pytest.fixture(scope="session")
def toy(tmp_path_factory):
    """The toy repository; treat as read-only."""
    return gitfixtures.toy_repo(tmp_path_factory.mktemp("toy") / "blinky")


@pytest.fixture(scope="session")
def toy_workspaces(toy, tmp_path_factory):
    from buildmend.gitops import checkout_baseline

    root = tmp_path_factory.mktemp("toy-ws")
    return {
        "buggy": checkout_baseline(toy.repo.path, toy.commits["A2"], dest_root=root),
        "fixed": checkout_baseline(toy.repo.path, toy.commits["M"], dest_root=root),
    }


@pytest.fixture(scope="session")
def toy_stage(toy_workspaces):
    return select_build_stage(parse_ci_spec(toy_workspaces["buggy"]), gitfixtures.TOY_JOB)


@pytest.fixture(scope="session")
def toy_artifacts(toy, toy_stage):
    return emit_reconstruction(toy_stage, toy.commits["A2"])


@pytest.fixture(scope="session")
def toy_ci_parsed():
    data = (gitfixtures.FIXTURES / "logs" / "toy_ci.log").read_bytes()
    return parse_log(RawLog(data=data, run_id="120", job_name=gitfixtures.TOY_JOB))


@pytest.fixture(scope="session")
def toy_failure(toy_ci_parsed, toy_stage):
    diag = toy_ci_parsed.first_fatal
    err = classify(diag, infer_build_phase(diag, toy_ci_parsed.normalized), toy_stage)
    err.project, err.run_id = gitfixtures.TOY_SLUG, "120"
    return err


@pytest.fixture
def fresh_toy(tmp_path):
    """A private copy of the toy repository for tests that write into it."""
    return gitfixtures.toy_repo(tmp_path / "blinky")


def toy_answer() -> str:
    return gitfixtures.toy_fixed_window()


FIXTURES = gitfixtures.FIXTURES
LOG_DIR: Path = FIXTURES / "logs"
