"""
Polling Service - automated collection of environmental data

Every interval the service samples each registered environmental sensor and
ingests a reading. Interval changes (manual or battery-driven) take effect at
the next tick. Time comes from the injected clock, so a virtual clock runs
simulated hours instantly.
"""

import logging
import threading
from dataclasses import replace
from typing import Callable, List, Optional

from services.automation_service import BatteryPolicy, effective_polling
from services.errors import ValidationError
from services.records import NodeRecord, SensorReading

logger = logging.getLogger(__name__)

Sampler = Callable[[NodeRecord, float], float]


class PollingService:
    def __init__(self, client, clock, sampler: Sampler, interval: float = 60.0,
                 sensors: Optional[List[NodeRecord]] = None,
                 policy: Optional[BatteryPolicy] = None, battery: Optional[Callable[[float], float]] = None):
        """
        Args:
            client: gateway client used for ingestion and sensor discovery
            clock: RealClock or VirtualClock
            sampler: (sensor, t) -> value of the simulated environmental sensor
            interval: base polling interval in seconds
            sensors: sensor set to poll (default: every sensor node on the gateway)
            policy, battery: optional battery-aware interval (battery(t) -> percent)
        """
        self.client = client
        self.clock = clock
        self.sampler = sampler
        self.set_interval(interval)
        self._sensors = sensors
        self.policy = policy
        self.battery = battery
        self.ticks: List[float] = []
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def set_interval(self, interval: float):
        if not interval > 0:
            raise ValidationError(f"polling interval must be > 0, got {interval}")
        self.interval = float(interval)

    @property
    def sensors(self) -> List[NodeRecord]:
        if self._sensors is not None:
            return self._sensors
        return [n for n in self.client.list_nodes() if not n.is_actuator]

    def current_interval(self) -> Optional[float]:
        """Interval in force now; None while the battery policy disables sensing"""
        if self.policy is None or self.battery is None:
            return self.interval
        return effective_polling(self.battery(self.clock.now()), replace(self.policy, base_interval=self.interval))

    def tick(self) -> int:
        t = self.clock.now()
        count = 0
        for sensor in self.sensors:
            value = self.sampler(sensor, t)
            self.client.ingest_reading(SensorReading(source=sensor.id, metric=sensor.capability,
                                                     value=float(value), room=sensor.room, t=t))
            count += 1
        self.ticks.append(t)
        logger.debug(f"Polled {count} sensors at t={t:.1f}")
        return count

    def _wait(self, seconds: float):
        if self.clock.mode == 'real':
            self._stop.wait(seconds)
        else:
            self.clock.sleep(seconds)

    def run(self, duration: Optional[float] = None) -> int:
        """
        Poll until stopped, or for duration seconds of clock time.

        While sensing is disabled the service re-checks the battery every base
        interval without sampling.
        """
        end = None if duration is None else self.clock.now() + duration
        readings = 0
        while not self._stop.is_set():
            interval = self.current_interval()
            wait = interval if interval is not None else self.interval
            if end is not None and self.clock.now() + wait > end + 1e-9:
                break
            self._wait(wait)
            if self._stop.is_set():
                break
            if interval is not None:
                readings += self.tick()
        logger.info(f"Polling stopped after {len(self.ticks)} ticks, {readings} readings")
        return readings

    def start(self):
        """Background polling thread (real clock deployments)"""
        self._stop.clear()
        self._thread = threading.Thread(target=self.run, name='syndesi-polling', daemon=True)
        self._thread.start()
        logger.info(f"🌡️ Polling started every {self.interval:.0f}s")

    def stop(self):
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None
