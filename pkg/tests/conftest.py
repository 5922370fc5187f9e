from __future__ import annotations

import pytest

_CRITERIA: dict[int, str] = {}


class CriterionRecorder:
    """Collects one PASS/FAIL line per acceptance criterion."""

    def __call__(self, number: int, title: str, checks: dict[str, tuple[bool, str]]) -> None:
        ok = all(passed for passed, _ in checks.values())
        detail = "; ".join(f"{name}: {text}{'' if passed else ' [FAIL]'}" for name, (passed, text) in checks.items())
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2} ({title}): {detail}"
        _CRITERIA[number] = line
        print(line)
        assert ok, line


@pytest.fixture
def criterion() -> CriterionRecorder:
    return CriterionRecorder()


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
