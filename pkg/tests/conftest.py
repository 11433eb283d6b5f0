import filecmp
from pathlib import Path

import pytest

from emodan.dataset import GenParams, generate_synthetic


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory) -> Path:
    """24 rendered faces, generated once per session; treat as read-only."""
    root = tmp_path_factory.mktemp("data") / "small"
    generate_synthetic(GenParams(seed=17, count=24), root)
    return root


def dirs_identical(a: Path, b: Path) -> bool:
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    if mismatch or errors:
        return False
    return all(dirs_identical(a / d, b / d) for d in cmp.common_dirs)


@pytest.fixture
def same_tree():
    return dirs_identical


# ---------------------------------------------------------------------------
# acceptance criteria: one pass/fail line each, taken from the real test outcome

_criteria: dict[int, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (report.when != "call" and not report.failed):
        return
    number, title = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    status = "PASS" if report.passed else "FAIL"
    if report.when != "call":
        detail = f"error during {report.when}"
    _criteria[number] = (title, status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, status, detail = _criteria[number]
        terminalreporter.write_line(f"criterion {number} [{status}] {title}" + (f": {detail}" if detail else ""))
