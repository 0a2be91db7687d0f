"""
Simulated room environment behind the WSAN sensor motes

First-order rules per room:
    temperature = baseline + excess + drift
        excess grows with occupants and decays by fan_cooling_rate while a fan is on
    illuminance = baseline + drift + lights + curtain (daytime only)
    humidity    = baseline + drift

Actuator state changes are integrated piecewise, so effects start at the tick
the change is observed.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from services.records import ActuationRecord, NodeRecord, SensorReading

logger = logging.getLogger(__name__)

DAY = 86400.0

OccupancySource = Callable[[], Mapping[str, Iterable[str]]]


@dataclass(frozen=True)
class EnvironmentConfig:
    baseline_temperature: float = 22.0
    baseline_illuminance: float = 300.0
    baseline_humidity: float = 45.0
    fan_cooling_rate: float = 0.1 / 60.0       # °C per second toward baseline
    occupant_heating_rate: float = 0.02 / 60.0  # °C per second per occupant
    light_lux: float = 200.0
    curtain_lux: float = 300.0
    drift_temperature: float = 0.2
    drift_illuminance: float = 20.0
    drift_humidity: float = 2.0
    drift_period: float = 3600.0
    day_start: float = 7 * 3600.0
    day_end: float = 19 * 3600.0
    clock_offset: float = 9 * 3600.0  # virtual t = 0 is 09:00


@dataclass
class RoomState:
    excess: float = 0.0
    fans_on: int = 0
    lights_on: int = 0
    curtains_up: int = 0
    occupants: int = 0
    last_t: float = 0.0
    phase: float = 0.0


class RoomEnvironment:
    def __init__(self, rooms: Iterable[str], seed: int = 0, cfg: EnvironmentConfig = EnvironmentConfig(),
                 initial_excess: Optional[Dict[str, float]] = None):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.rooms: Dict[str, RoomState] = {}
        for room in sorted(rooms):
            self.rooms[room] = RoomState(excess=(initial_excess or {}).get(room, 0.0),
                                         phase=float(rng.uniform(0, 2 * math.pi)))

    def _advance(self, room: str, t: float):
        state = self.rooms[room]
        dt = t - state.last_t
        if dt <= 0:
            return
        state.excess += self.cfg.occupant_heating_rate * state.occupants * dt
        if state.fans_on:
            state.excess = max(0.0, state.excess - self.cfg.fan_cooling_rate * dt)
        state.last_t = t

    def is_daytime(self, t: float) -> bool:
        tod = (t + self.cfg.clock_offset) % DAY
        return self.cfg.day_start <= tod < self.cfg.day_end

    def _drift(self, room: str, t: float, amplitude: float) -> float:
        return amplitude * math.sin(2 * math.pi * t / self.cfg.drift_period + self.rooms[room].phase)

    # ===== State changes =====

    def set_actuators(self, room: str, nodes: Sequence[NodeRecord], t: float):
        """Sync actuator counts for a room from the node records (status as of t)"""
        self._advance(room, t)
        state = self.rooms[room]
        state.fans_on = sum(1 for n in nodes if n.capability == 'fan' and n.status == 'on')
        state.lights_on = sum(1 for n in nodes if n.capability == 'light' and n.status == 'on')
        state.curtains_up = sum(1 for n in nodes if n.capability == 'curtain' and n.status == 'up')

    def set_occupants(self, room: str, count: int, t: float):
        self._advance(room, t)
        self.rooms[room].occupants = count

    # ===== Sampling =====

    def temperature(self, room: str, t: float) -> float:
        self._advance(room, t)
        return (self.cfg.baseline_temperature + self.rooms[room].excess
                + self._drift(room, t, self.cfg.drift_temperature))

    def illuminance(self, room: str, t: float) -> float:
        self._advance(room, t)
        state = self.rooms[room]
        lux = self.cfg.baseline_illuminance + self._drift(room, t, self.cfg.drift_illuminance)
        lux += self.cfg.light_lux * min(state.lights_on, 1)
        if self.is_daytime(t):
            lux += self.cfg.curtain_lux * min(state.curtains_up, 1)
        return max(0.0, lux)

    def humidity(self, room: str, t: float) -> float:
        return self.cfg.baseline_humidity + self._drift(room, t, self.cfg.drift_humidity)

    def sample(self, sensor: NodeRecord, t: float) -> float:
        if sensor.capability == 'temperature':
            return self.temperature(sensor.room, t)
        if sensor.capability == 'illuminance':
            return self.illuminance(sensor.room, t)
        return self.humidity(sensor.room, t)

    def sampler(self, client=None, occupancy: Optional[OccupancySource] = None) -> Callable[[NodeRecord, float], float]:
        """
        Polling sampler. With a gateway client, actuator states are read from
        the gateway before each sample so automation feeds back into the room.
        occupancy() returns the current occupants per room.
        """
        def _sample(sensor: NodeRecord, t: float) -> float:
            if client is not None:
                self.set_actuators(sensor.room, client.list_nodes(room=sensor.room), t)
            if occupancy is not None:
                self.set_occupants(sensor.room, len(occupancy().get(sensor.room, ())), t)
            return self.sample(sensor, t)
        return _sample


def synth_environment(rooms: Iterable[str], sensors: Sequence[NodeRecord], occupancy_timeline: Sequence = (),
                      clock=None, interval: float = 60.0, duration: float = 3600.0, seed: int = 0,
                      actuations: Sequence[ActuationRecord] = (), actuators: Sequence[NodeRecord] = (),
                      cfg: EnvironmentConfig = EnvironmentConfig(),
                      initial_excess: Optional[Dict[str, float]] = None) -> List[SensorReading]:
    """
    Reading stream of every sensor at each interval tick over duration.

    occupancy_timeline: (t, room, occupant count) changes; actuations are
    applied to the actuator nodes they name. With a virtual clock the clock is
    advanced through the ticks, otherwise ticks start at 0.
    """
    env = RoomEnvironment(rooms, seed, cfg, initial_excess)
    status: Dict[str, NodeRecord] = {n.id: n for n in actuators}
    changes = sorted([(t, 0, room, count) for t, room, count in occupancy_timeline]
                     + [(a.t, 1, a.node, a.new) for a in actuations], key=lambda c: (c[0], c[1]))
    start = clock.now() if clock is not None else 0.0

    readings = []
    ci = 0
    tick = start + interval
    while tick <= start + duration + 1e-9:
        if clock is not None and clock.mode == 'virtual':
            clock.set(tick)
        while ci < len(changes) and changes[ci][0] <= tick:
            t, kind, target, value = changes[ci]
            if kind == 0:
                env.set_occupants(target, value, t)
            elif target in status:
                node = status[target]
                status[target] = NodeRecord(node.id, node.kind, node.room, node.capability, value)
                env.set_actuators(node.room, [n for n in status.values() if n.room == node.room], t)
            ci += 1
        for sensor in sensors:
            readings.append(SensorReading(source=sensor.id, metric=sensor.capability,
                                          value=env.sample(sensor, tick), room=sensor.room, t=tick))
        tick += interval
    logger.debug(f"Synthesized {len(readings)} environmental readings")
    return readings
