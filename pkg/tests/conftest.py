import time

import pytest

_RESULTS = pytest.StashKey[list]()


class Gate:
    """Times one acceptance criterion and records a pass/fail line for the summary."""

    def __init__(self, results):
        self.results = results

    def check(self, number, title, budget_s, body):
        t0 = time.perf_counter()
        ok, err = False, ""
        try:
            body()
            ok = True
        except AssertionError as exc:
            err = str(exc).splitlines()[0] if str(exc) else "assertion failed"
        elapsed = time.perf_counter() - t0
        in_time = elapsed < budget_s
        status = "PASS" if ok and in_time else "FAIL"
        note = "" if in_time else f" (over {budget_s:g} s budget)"
        if err:
            note += f" ({err})"
        line = f"[{status}] criterion {number:2d}: {title} in {elapsed:.2f} s{note}"
        self.results.append((number, line))
        print(line)
        assert ok, line
        assert in_time, line


@pytest.fixture
def gate(request):
    return Gate(request.config.stash.setdefault(_RESULTS, []))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS, [])
    if results:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(results):
            terminalreporter.write_line(line)
