import re

import numpy as np
import pytest

CRITERIA = {
    1: "gradient correctness",
    2: "splat oracle",
    3: "grammar and quantization",
    4: "data pipeline fidelity",
    5: "expert closed loop",
    6: "yield-rule ablation direction",
    7: "overfit imitation",
    8: "pedestrian predictor surrogate",
    9: "metric definitions",
}
_RESULTS = {}
_DETAILS = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def report_detail(request):
    """Acceptance tests call this with a one-line measurement summary."""
    match = re.search(r"test_criterion_(\d+)", request.node.name)

    def note(text):
        if match:
            _DETAILS[int(match.group(1))] = text

    return note


def pytest_runtest_logreport(report):
    match = re.search(r"test_criterion_(\d+)", report.nodeid)
    if not match:
        return
    n = int(match.group(1))
    if report.when == "call" or (report.when == "setup" and report.failed):
        _RESULTS[n] = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        detail = _DETAILS.get(n, "")
        terminalreporter.write_line(f"criterion {n} ({CRITERIA.get(n, '?')}): {_RESULTS[n]}  {detail}".rstrip())
