import json

import pytest

from angle_embed.data import IssueRecord


def issue_dump() -> list[IssueRecord]:
    """Eight issues across two repos with three resolvable duplicate links."""
    return [
        IssueRecord("acme/app", 7, "Crash on start", "App crashes at launch", ["Closing as a duplicate of #12"]),
        IssueRecord("acme/app", 12, "Startup crash", "Segfault when opening"),
        IssueRecord("acme/app", 15, "Dark mode", "Please add a dark theme", ["DUPLICATE OF #16, see there"]),
        IssueRecord("acme/app", 16, "Theme support", "Night colours wanted"),
        IssueRecord("acme/app", 20, "Typo in docs", "Spelling error in README", ["duplicate of #99"]),
        IssueRecord("acme/lib", 3, "Slow import", "Import takes seconds", ["Duplicate  of  #4"]),
        IssueRecord("acme/lib", 4, "Import latency", "import is slow"),
        IssueRecord("acme/lib", 9, "Add tests", "Coverage is low"),
    ]


@pytest.fixture
def issues():
    return issue_dump()


@pytest.fixture
def issue_file(tmp_path):
    path = tmp_path / "issues.jsonl"
    with path.open("w") as fh:
        for r in issue_dump():
            fh.write(json.dumps({"repo": r.repo, "number": r.number, "title": r.title, "body": r.body, "comments": r.comments}) + "\n")
    return path


_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion reported as PASS/FAIL")


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    report = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None and (report.when == "call" or report.outcome != "passed"):
        number, title = marker.args
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        status = "PASS" if report.passed else "FAIL"
        if _CRITERIA.get(number, ("PASS",))[0] == "PASS":
            _CRITERIA[number] = (status, title, detail)
    return report


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, title, detail = _CRITERIA[number]
        line = f"{status} [{number}] {title}"
        terminalreporter.write_line(f"{line} ({detail})" if detail else line)
