import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    deadline=None,
    max_examples=60,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("default")

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    number, title = mark.args
    details = [str(v) for k, v in item.user_properties if k == "measured"]
    passed, _, seen = _CRITERIA.get(number, (True, title, []))
    # a criterion covered by several tests passes only when all of them pass
    _CRITERIA[number] = (passed and rep.passed, title, seen + details)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        passed, title, details = _CRITERIA[number]
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {title}"
        if details:
            line += f"  [{'; '.join(details)}]"
        terminalreporter.write_line(line)
