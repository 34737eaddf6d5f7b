import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """``verdict(k, ok, detail)`` records and prints one PASS/FAIL line."""
    def record(k: int, ok: bool, detail: str = "") -> bool:
        line = f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        VERDICTS.append(line)
        print(line, flush=True)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
