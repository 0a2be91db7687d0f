"""
Automation Service - automated environment control from tracked location

    - Location change: lights/fans on in the new room; the previous room is
      switched off only when its last occupant has left
    - Environmental readings: setpoint rules with hysteresis, governed by the
      lowest-id occupant's preferences
    - Battery policy: polling interval doubled below 50%, sensing and
      localization disabled below 20%

The handlers are pure functions of (event, state). AutomationService runs them
over time-ordered event streams and issues the resulting actions through a
gateway client, journaling every event.
"""

import json
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

from services.errors import ParseError, SyndesiError, ValidationError
from services.records import EnvPrefs, NodeRecord, SensorReading

logger = logging.getLogger(__name__)

OCCUPANCY_CAPABILITIES = ('light', 'fan')

OccupancyMap = Dict[str, FrozenSet[str]]
Action = Tuple[str, str]


@dataclass(frozen=True)
class BatteryPolicy:
    base_interval: float = 60.0
    half_threshold: float = 50.0
    off_threshold: float = 20.0

    def __post_init__(self):
        if not 0 < self.off_threshold < self.half_threshold <= 100:
            raise ValidationError("battery thresholds must satisfy 0 < off < half <= 100")
        if self.base_interval <= 0:
            raise ValidationError(f"base_interval must be > 0, got {self.base_interval}")


@dataclass(frozen=True)
class AutomationEvent:
    t: float
    user: Optional[str]
    cause: str
    actions: Tuple[Action, ...]

    def to_dict(self) -> Dict:
        return {'t': self.t, 'user': self.user, 'cause': self.cause,
                'actions': [{'node': n, 'status': s} for n, s in self.actions]}


@dataclass(frozen=True)
class LocationChange:
    t: float
    user: str
    room: str


# ===== Pure handlers =====

def effective_polling(battery: float, p: BatteryPolicy = BatteryPolicy()) -> Optional[float]:
    """Polling interval for a battery level; None means sensing is disabled"""
    if not 0 <= battery <= 100:
        raise ValidationError(f"battery must be in [0, 100], got {battery}")
    if battery < p.off_threshold:
        return None
    if battery < p.half_threshold:
        return 2 * p.base_interval
    return p.base_interval


def room_of(user: str, occ: OccupancyMap) -> Optional[str]:
    for room, users in occ.items():
        if user in users:
            return room
    return None


def _room_actuators(nodes: Iterable[NodeRecord], room: str, capabilities) -> List[NodeRecord]:
    return sorted((n for n in nodes if n.room == room and n.is_actuator and n.capability in capabilities),
                  key=lambda n: n.id)


def on_location_change(user: str, new_room: str, occ: OccupancyMap, nodes: Sequence[NodeRecord],
                       t: float = 0.0, rooms: Optional[Iterable[str]] = None) -> Tuple[AutomationEvent, OccupancyMap]:
    if rooms is not None and new_room not in set(rooms):
        raise ValidationError(f"unknown room '{new_room}'")

    old_room = room_of(user, occ)
    updated = {room: users - {user} for room, users in occ.items()}
    updated = {room: users for room, users in updated.items() if users}
    updated[new_room] = updated.get(new_room, frozenset()) | {user}

    actions: List[Action] = [(n.id, 'on') for n in _room_actuators(nodes, new_room, OCCUPANCY_CAPABILITIES)]
    if old_room is not None and old_room != new_room and not updated.get(old_room):
        actions += [(n.id, 'off') for n in _room_actuators(nodes, old_room, OCCUPANCY_CAPABILITIES)]
    return AutomationEvent(t, user, 'location_change', tuple(actions)), updated


def on_env_reading(r: SensorReading, occupants: Iterable[str], prefs_of: Union[Callable[[str], EnvPrefs], Mapping],
                   nodes: Sequence[NodeRecord]) -> Optional[AutomationEvent]:
    occupants = sorted(occupants)
    if not occupants:
        return None
    governor = occupants[0]
    prefs = prefs_of.get(governor, EnvPrefs()) if isinstance(prefs_of, Mapping) else prefs_of(governor)

    actions: List[Action] = []
    if r.metric == 'temperature':
        fans = _room_actuators(nodes, r.room, ('fan',))
        if r.value > prefs.desired_temperature + prefs.hysteresis_temp:
            actions = [(n.id, 'on') for n in fans]
        elif r.value < prefs.desired_temperature - prefs.hysteresis_temp:
            actions = [(n.id, 'off') for n in fans]
    elif r.metric == 'illuminance':
        lights = _room_actuators(nodes, r.room, ('light',))
        curtains = _room_actuators(nodes, r.room, ('curtain',))
        if r.value < prefs.desired_illuminance - prefs.hysteresis_lux:
            actions = [(n.id, 'on') for n in lights] + [(n.id, 'up') for n in curtains]
        elif r.value > prefs.desired_illuminance + prefs.hysteresis_lux:
            if all(c.status == 'down' for c in curtains):
                actions = [(n.id, 'off') for n in lights]
            else:
                actions = [(n.id, 'down') for n in curtains]

    if not actions:
        return None
    return AutomationEvent(r.t, governor, 'env_reading', tuple(actions))


# ===== Control loop =====

@dataclass
class AutomationState:
    occupancy: OccupancyMap = field(default_factory=dict)
    journal: List[Dict] = field(default_factory=list)


class AutomationService:
    """
    Control unit: consumes location changes and readings, actuates through a gateway client.

    The client needs list_nodes(room=None), mediate(node, status, cause) and
    get_user(user_id); see services.gateway_client.
    """

    def __init__(self, client, rooms: Optional[Iterable[str]] = None, journal_path: Optional[str] = None):
        self.client = client
        self.rooms = sorted(rooms) if rooms is not None else None
        self.journal_path = journal_path
        self.state = AutomationState()
        self._journal_file = open(journal_path, 'a', encoding='utf-8') if journal_path else None
        # request threads and the polling thread share one occupancy map
        self._lock = threading.RLock()
        logger.info(f"Automation service initialized (journal={journal_path or 'memory'})")

    @property
    def journal(self) -> List[Dict]:
        return self.state.journal

    @property
    def occupancy(self) -> OccupancyMap:
        return self.state.occupancy

    def _user(self, user_id: str):
        try:
            return self.client.get_user(user_id)
        except SyndesiError:
            return None

    def _prefs(self, user_id: str) -> EnvPrefs:
        user = self._user(user_id)
        return user.prefs if user is not None else EnvPrefs()

    def _issue(self, action: Action) -> Dict:
        node, status = action
        error = None
        for attempt in range(2):
            try:
                self.client.mediate(node, status, cause='automation')
                return {'node': node, 'status': status, 'ok': True}
            except SyndesiError as e:
                error = e
                if attempt == 0:
                    logger.warning(f"Actuation {node}={status} failed ({e.code}), retrying once")
            except Exception as e:
                error = e
                if attempt == 0:
                    logger.warning(f"Actuation {node}={status} failed ({e}), retrying once")
        return {'node': node, 'status': status, 'ok': False,
                'error': getattr(error, 'code', 'internal'), 'message': str(error)}

    def _record(self, event: AutomationEvent, results: List[Dict]):
        entry = event.to_dict()
        entry['results'] = results
        self.state.journal.append(entry)
        if self._journal_file is not None:
            self._journal_file.write(json.dumps(entry) + '\n')
            self._journal_file.flush()

    def handle_location(self, change: LocationChange) -> Optional[AutomationEvent]:
        with self._lock:
            nodes = self.client.list_nodes()
            event, occupancy = on_location_change(change.user, change.room, self.state.occupancy, nodes,
                                                  t=change.t, rooms=self.rooms)
            self.state.occupancy = occupancy

            user = self._user(change.user)
            if user is not None and not user.automation_enabled:
                logger.debug(f"Automation disabled for {change.user}, occupancy updated only")
                event = AutomationEvent(change.t, change.user, 'location_change', ())
            results = [self._issue(a) for a in event.actions]
            self._record(event, results)
            return event

    def handle_reading(self, reading: SensorReading) -> Optional[AutomationEvent]:
        with self._lock:
            occupants = self.state.occupancy.get(reading.room, frozenset())
            if not occupants:
                return None
            event = on_env_reading(reading, occupants, self._prefs, self.client.list_nodes(room=reading.room))
            if event is None:
                return None
            results = [self._issue(a) for a in event.actions]
            self._record(event, results)
            return event

    def run(self, locations: Iterable[LocationChange] = (), readings: Iterable[SensorReading] = ()) -> List[Dict]:
        """Consume both streams in timestamp order; location events win ties"""
        merged = sorted(
            [(c.t, 0, i, c) for i, c in enumerate(locations)] + [(r.t, 1, i, r) for i, r in enumerate(readings)],
            key=lambda item: item[:3]
        )
        for _, kind, _, item in merged:
            if kind == 0:
                self.handle_location(item)
            else:
                self.handle_reading(item)
        return self.state.journal

    def close(self):
        if self._journal_file is not None:
            self._journal_file.close()
            self._journal_file = None


def read_location_stream(lines: Iterable[str]) -> List[LocationChange]:
    """JSON-lines {"t":..., "user":..., "room":...}"""
    changes = []
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        try:
            raw = json.loads(line)
            changes.append(LocationChange(float(raw['t']), str(raw['user']), str(raw['room'])))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise ParseError(f"location stream line {n}: {e}")
    return changes
