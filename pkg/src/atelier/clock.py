"""Logical clock shared by the stores and the engine.

Persisted artifacts (file versions, messages, events, trajectories) are
timestamped with ticks from this counter instead of wall time, so that
two runs of the same scripted scenario produce byte-identical state.
Wall time is only consulted for real deadlines (final-answer mode).
"""

from __future__ import annotations

import threading


class LogicalClock:
    def __init__(self, start: int = 0):
        self._value = start
        self._lock = threading.Lock()

    def tick(self) -> int:
        """Advance and return the new timestamp."""
        with self._lock:
            self._value += 1
            return self._value

    @property
    def value(self) -> int:
        return self._value

    def restore(self, value: int) -> None:
        """Reset the counter, used when reloading persisted state."""
        with self._lock:
            self._value = max(self._value, value)
