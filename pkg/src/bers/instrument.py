"""Process-wide call counters used to prove inference purity."""

from __future__ import annotations

from collections import Counter
from contextlib import contextmanager

COUNTERS: Counter = Counter()

TVL1_CALLS = "tvl1_calls"
TEACHER_BUILDS = "teacher_builds"
TEACHER_FORWARDS = "teacher_forwards"
STUDENT_FORWARDS = "student_forwards"


def bump(key: str, n: int = 1) -> None:
    COUNTERS[key] += n


def snapshot() -> dict[str, int]:
    keys = (TVL1_CALLS, TEACHER_BUILDS, TEACHER_FORWARDS, STUDENT_FORWARDS)
    return {k: COUNTERS[k] for k in keys}


def reset() -> None:
    COUNTERS.clear()


@contextmanager
def counting():
    """Yield a dict that is filled with the counter deltas on exit."""
    before = snapshot()
    delta: dict[str, int] = {}
    try:
        yield delta
    finally:
        after = snapshot()
        delta.update({k: after[k] - before[k] for k in after})
