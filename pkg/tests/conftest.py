import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> bool:
    if criterion in ACCEPTANCE:  # criteria checked by several tests pass only if all parts pass
        prev_ok, prev_detail = ACCEPTANCE[criterion]
        ACCEPTANCE[criterion] = (prev_ok and bool(ok), f"{prev_detail}; {detail}")
    else:
        ACCEPTANCE[criterion] = (bool(ok), detail)
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} ({detail})")
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
