import pytest

CRITERIA = {
    1: "tree exactness",
    2: "gradient correctness",
    3: "sampler fidelity",
    4: "synthetic accuracy table",
    5: "coupling identifiability",
    6: "BP convergence",
    7: "estimator unbiasedness",
    8: "importance-sampling variance",
    9: "degenerate equivalences",
}

_results = {}


@pytest.fixture
def record():
    """``record(n, passed, detail)`` stores the verdict for acceptance criterion ``n``."""
    def _record(n, passed, detail):
        _results[n] = (bool(passed), detail)
        print(f"criterion {n} ({CRITERIA[n]}): {'PASS' if passed else 'FAIL'}  {detail}")
    return _record


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        if n in _results:
            passed, detail = _results[n]
            verdict = "PASS" if passed else "FAIL"
        else:
            verdict, detail = "NOT RUN", "deselected, or errored before reaching a verdict"
        terminalreporter.write_line(f"criterion {n} ({name}): {verdict}  {detail}")
