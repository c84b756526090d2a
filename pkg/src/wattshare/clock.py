"""Clocks driving agents and links.

VirtualClock is a discrete-event scheduler: time only moves when run() pops
the next due callback, so whole sessions execute in microseconds and repeat
bit-identically. WallClock paces the same callbacks against real time with a
configurable acceleration factor for interactive and multi-process runs.
"""

from __future__ import annotations

import heapq
import itertools
import threading
import time
from typing import Any, Callable


class TimerHandle:
    """Cancellation token for a scheduled callback."""

    __slots__ = ("when_s", "cancelled", "_timer")

    def __init__(self, when_s: float):
        self.when_s = when_s
        self.cancelled = False
        self._timer: threading.Timer | None = None

    def cancel(self) -> None:
        self.cancelled = True
        if self._timer is not None:
            self._timer.cancel()


class VirtualClock:
    """Single-threaded event scheduler over simulated seconds."""

    def __init__(self, start_s: float = 0.0):
        self._now = start_s
        self._heap: list[tuple[float, int, TimerHandle, Callable[[], Any]]] = []
        self._seq = itertools.count()

    def now(self) -> float:
        return self._now

    def call_at(self, when_s: float, fn: Callable[[], Any]) -> TimerHandle:
        if when_s < self._now:
            when_s = self._now
        handle = TimerHandle(when_s)
        heapq.heappush(self._heap, (when_s, next(self._seq), handle, fn))
        return handle

    def call_later(self, delay_s: float, fn: Callable[[], Any]) -> TimerHandle:
        return self.call_at(self._now + max(0.0, delay_s), fn)

    def run_until_idle(self, max_t_s: float = 1e9) -> float:
        """Run callbacks in (time, scheduling) order until none remain."""
        while self._heap:
            when_s, _, handle, fn = heapq.heappop(self._heap)
            if handle.cancelled:
                continue
            if when_s > max_t_s:
                # Put it back so a later run can resume past the horizon.
                heapq.heappush(self._heap, (when_s, next(self._seq), handle, fn))
                break
            self._now = max(self._now, when_s)
            fn()
        return self._now

    def run_until(self, t_s: float) -> float:
        self.run_until_idle(max_t_s=t_s)
        self._now = max(self._now, t_s)
        return self._now


class WallClock:
    """Monotonic wall clock; simulated seconds = wall seconds * acceleration."""

    def __init__(self, acceleration: float = 1.0):
        if acceleration < 1:
            raise ValueError(f"acceleration must be >= 1, got {acceleration}")
        self.acceleration = acceleration
        self._anchor = time.monotonic()

    def now(self) -> float:
        return (time.monotonic() - self._anchor) * self.acceleration

    def call_at(self, when_s: float, fn: Callable[[], Any]) -> TimerHandle:
        delay = max(0.0, (when_s - self.now()) / self.acceleration)
        handle = TimerHandle(when_s)

        def fire() -> None:
            if not handle.cancelled:
                fn()

        timer = threading.Timer(delay, fire)
        timer.daemon = True
        handle._timer = timer
        timer.start()
        return handle

    def call_later(self, delay_s: float, fn: Callable[[], Any]) -> TimerHandle:
        return self.call_at(self.now() + max(0.0, delay_s), fn)
