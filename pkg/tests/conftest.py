"""Collects acceptance verdicts and prints one line per criterion at the end of the run."""

import pytest

_RESULTS: dict[int, tuple[bool, str]] = {}


class CriterionRecorder:
    def __call__(self, number: int, passed: bool, detail: str) -> bool:
        # repeated calls for one criterion (its sub-checks) are combined
        prev_ok, prev_detail = _RESULTS.get(number, (True, ""))
        _RESULTS[number] = (prev_ok and bool(passed), f"{prev_detail}; {detail}" if prev_detail else detail)
        return bool(passed)


@pytest.fixture(scope="session")
def record_criterion():
    return CriterionRecorder()


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        passed, detail = _RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
