import json
import sys
from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"
TOOLS = FIXTURES / "tools"


def tool_command(script: str, *args: str) -> list[str]:
    return [sys.executable, str(TOOLS / script), *args]


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def write_registry(tmp_path):
    def _write(entries, name="registry.json"):
        path = tmp_path / name
        path.write_text(json.dumps(entries))
        return path

    return _write


_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (report.when != "call" and report.passed):
        return
    n, title = mark.args
    entry = _criteria.setdefault(n, {"title": title, "passed": True, "detail": ""})
    entry["passed"] = entry["passed"] and report.passed
    entry["detail"] = dict(item.user_properties).get("detail", entry["detail"])
    if report.failed:
        msg = str(call.excinfo.value).splitlines()[0] if call.excinfo else "failed"
        entry["detail"] = f"{entry['detail']} | {msg}".strip(" |")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        e = _criteria[n]
        status = "PASS" if e["passed"] else "FAIL"
        terminalreporter.write_line(f"criterion {n:>2} {status}  {e['title']}: {e['detail']}")
