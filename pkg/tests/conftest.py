import sys
import time

_START = time.perf_counter()
SUITE_LIMIT_S = 900


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
    elapsed = time.perf_counter() - _START
    verdict = "PASS" if elapsed < SUITE_LIMIT_S else "FAIL"
    terminalreporter.write_line(f"{verdict} [8] full suite runtime: {elapsed:.0f} s (< {SUITE_LIMIT_S} s)")
