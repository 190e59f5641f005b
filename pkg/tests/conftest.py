from __future__ import annotations

import os
import tempfile

# keep probe batches built during the tests out of the user's cache
if not os.environ.get("OUI_LAB_CACHE"):
    os.environ["OUI_LAB_CACHE"] = tempfile.mkdtemp(prefix="oui_lab_test_cache_")


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 11):
        terminalreporter.write_line(RESULTS.get(n, f"criterion {n:2d}: NOT REPORTED (not run or errored)"))
