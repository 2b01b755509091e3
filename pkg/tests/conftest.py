import os

os.environ.setdefault("BERS_THREADS", "1")

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "bers", deadline=None, max_examples=25, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.load_profile("bers")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ORDER: dict[str, int] = {}


def pytest_collection_modifyitems(items):
    _ORDER.update({item.nodeid: i for i, item in enumerate(items)})


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, with its measured numbers."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if "test_acceptance.py" not in getattr(rep, "nodeid", "") or rep.when != "call" and outcome != "error":
                continue
            props = dict(getattr(rep, "user_properties", []))
            name = props.get("criterion", rep.nodeid.split("::")[-1])
            lines.append((rep.nodeid, "PASS" if outcome == "passed" else "FAIL", name, props.get("detail", "")))
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, status, name, detail in sorted(lines, key=lambda l: _ORDER.get(l[0], 0)):
        terminalreporter.write_line(f"{status}  {name}" + (f"  [{detail}]" if detail else ""))
