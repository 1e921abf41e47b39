"""Spin waits tuned for this platform's scheduler.

Two facts drive the design.  Parked lock waiters pay a GIL-handoff convoy of
hundreds of microseconds per acquisition, so short critical sections use
try-acquire spins instead.  Timed sleeps wake in ~10 us while any CPU is
busy but in ~1 ms once the machine goes idle, so waits yield-spin for a
budget scaled down as more threads compete for the two cores, then fall back
to half-millisecond sleeps."""

from __future__ import annotations

import threading
import time

BACKOFF_SLEEP = 0.0005

_BUDGET_CACHE = [0.0, 4000]  # expiry timestamp, cached value


def spin_budget() -> int:
    """Hot sleep(0) iterations to spend before backing off to timed sleeps.

    Scales inversely with the number of live threads (enumerating them is
    expensive under contention, hence the short-lived cache)."""
    now = time.monotonic()
    if now > _BUDGET_CACHE[0]:
        _BUDGET_CACHE[1] = max(400, 24_000 // max(threading.active_count(), 4))
        _BUDGET_CACHE[0] = now + 0.05
    return _BUDGET_CACHE[1]


def spin_wait(check, budget: int = None):
    """Poll `check` until truthy: hot yields within budget, then backoff."""
    if budget is None:
        budget = spin_budget()
    spins = 0
    while not check():
        spins += 1
        time.sleep(0 if spins < budget else BACKOFF_SLEEP)


class SpinLock:
    __slots__ = ("_lock",)

    def __init__(self):
        self._lock = threading.Lock()

    def acquire(self):
        lock = self._lock
        if lock.acquire(False):
            return
        spins = 0
        while not lock.acquire(False):
            spins += 1
            time.sleep(0 if spins < 2000 else BACKOFF_SLEEP)

    def release(self):
        self._lock.release()

    def __enter__(self):
        self.acquire()
        return self

    def __exit__(self, exc_type, exc, tb):
        self._lock.release()
