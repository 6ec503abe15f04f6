import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

CRITERIA = {
    1: "full-mask refocused attention equals plain attention",
    2: "masked weights are zero and survivors gain weight",
    3: "renormalization matches brute-force oracle on enumerated fixtures",
    4: "targeted guidance partitions pixels bit-exactly",
    5: "all-ungrounded sampler run equals unconditional run",
    6: "ungrounded mask is the complement of the grounded union",
    7: "retained tags and coverage fall with the threshold",
    8: "PSNR and SSIM match analytic and brute-force values",
    9: "ablation lattice gives distinct, correctly localized outputs",
    10: "refocused heatmaps have no mass outside the tag mask",
}

_results = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion exercised by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    entry = _results.setdefault(n, {"passed": 0, "failed": 0, "xfailed": 0})
    if rep.when == "call" or rep.failed:
        if hasattr(rep, "wasxfail"):
            entry["xfailed"] += 1
        elif rep.passed:
            entry["passed"] += 1
        elif rep.failed:
            entry["failed"] += 1


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in CRITERIA.items():
        r = _results.get(n)
        if r is None:
            status = "NOT RUN"
        elif r["failed"]:
            status = "FAIL"
        else:
            status = "PASS"
        note = ""
        if r and r["xfailed"]:
            note = f" ({r['xfailed']} known-discrepancy check xfailed, see test docstring)"
        counts = "" if r is None else f" [{r['passed']} passed, {r['failed']} failed]"
        terminalreporter.write_line(f"criterion {n:2d}: {status:7s} {title}{counts}{note}")
