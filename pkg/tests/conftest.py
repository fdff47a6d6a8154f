import pytest

from cidc import harness

CHURN_CONFIG = "tx_pairs = 254us:24\nprotocols = cidc\ndelta_values = 1, 3\n"

_criteria: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.fixture(scope="session")
def sweep():
    """Default sweep over both K values and all N, with collision checks on."""
    return harness.run_experiment(harness.parse_config(""), check_collisions=True)


@pytest.fixture(scope="session")
def churn_sweep():
    return harness.run_experiment(harness.parse_config(CHURN_CONFIG))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    failed = rep.failed or (rep.when == "setup" and rep.skipped)
    if rep.when == "call" or failed:
        prev = _criteria.get(number)
        if prev is None or prev[1] == "PASS":
            notes = "; ".join(str(v) for k, v in item.user_properties if k == "note")
            crash = getattr(rep.longrepr, "reprcrash", None)
            message = crash.message if crash else str(rep.longrepr)
            detail = notes if rep.passed else " ".join(message.split())[:160]
            _criteria[number] = (title, "PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, status, detail = _criteria[number]
        line = f"criterion {number:>2} {status}: {title}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)
