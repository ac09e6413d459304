"""Collects one verdict per acceptance criterion and prints them at the end.

Acceptance tests are named ``test_criterion_<n>_...``; they call the
``verdict`` fixture with the measured numbers before asserting.
"""

import pytest

VERDICTS: dict[int, tuple[str, str]] = {}
PREFIX = "test_criterion_"


def _number(name: str):
    if not name.startswith(PREFIX):
        return None
    digits = name[len(PREFIX):].split("_", 1)[0]
    return int(digits) if digits.isdigit() else None


@pytest.fixture
def verdict(request):
    """``verdict(ok, detail, soft=False)``; soft criteria report WARN instead of FAIL."""
    number = _number(request.node.originalname)

    def record(ok: bool, detail: str, soft: bool = False) -> bool:
        VERDICTS[number] = ("PASS" if ok else ("WARN" if soft else "FAIL"), detail)
        return ok

    return record


def pytest_runtest_logreport(report):
    # a crash before the verdict was recorded still shows up as a failure
    number = _number(report.nodeid.rsplit("::", 1)[-1].split("[", 1)[0])
    if number is None or not report.failed:
        return
    _, detail = VERDICTS.get(number, ("", f"error during {report.when}"))
    VERDICTS[number] = ("FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(VERDICTS):
        status, detail = VERDICTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {detail}")
