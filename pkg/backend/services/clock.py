"""
Clock interface used by every time-driven part of the gateway (polling, automation).

RealClock follows wall time; VirtualClock only moves when told to, so tests and the
experiment harness can run simulated hours instantly.
"""

import threading
import time


class RealClock:
    mode = 'real'

    def now(self) -> float:
        return time.time()

    def sleep(self, seconds: float):
        time.sleep(max(0.0, seconds))


class VirtualClock:
    mode = 'virtual'

    def __init__(self, start: float = 0.0):
        self._now = float(start)
        self._lock = threading.Lock()

    def now(self) -> float:
        with self._lock:
            return self._now

    def sleep(self, seconds: float):
        self.advance(seconds)

    def advance(self, seconds: float) -> float:
        if seconds < 0:
            raise ValueError(f"cannot move a clock backwards ({seconds})")
        with self._lock:
            self._now += seconds
            return self._now

    def set(self, t: float):
        with self._lock:
            if t < self._now:
                raise ValueError(f"cannot move a clock backwards ({t} < {self._now})")
            self._now = float(t)


def make_clock(mode: str):
    if mode == 'virtual':
        return VirtualClock()
    if mode == 'real':
        return RealClock()
    raise ValueError(f"unknown clock mode: {mode}")
