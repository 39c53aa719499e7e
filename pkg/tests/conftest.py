import re
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, in criterion order."""
    lines = {}
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            m = re.search(r"test_acceptance\.py::test_(\d+)_(\w+)", rep.nodeid)
            if not m or (rep.when != "call" and rep.outcome == "passed"):
                continue
            detail = dict(rep.user_properties).get("detail", "")
            status = "PASS" if rep.outcome == "passed" else "FAIL"
            lines[int(m.group(1))] = f"criterion {int(m.group(1)):2d} {status}  {m.group(2)}  {detail}"
    if lines:
        terminalreporter.section("acceptance")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
