"""
Gateway records - nodes, readings, users, actuations

Plain dataclasses with JSON (de)serialization. Parsing validates the type
invariants so the HTTP layer and the fixture loaders reject the same inputs.
"""

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional

from services.errors import ValidationError

ACTUATOR_CAPABILITIES = ('light', 'fan', 'curtain')
SENSOR_CAPABILITIES = ('temperature', 'illuminance', 'humidity')
NODE_KINDS = ('sensor', 'actuator')

ON_OFF = ('on', 'off')
UP_DOWN = ('up', 'down')

METRIC_UNITS = {
    'temperature': '°C',
    'illuminance': 'lux',
    'humidity': '%RH',
}


def valid_statuses(capability: str):
    if capability == 'curtain':
        return UP_DOWN
    if capability in ACTUATOR_CAPABILITIES:
        return ON_OFF
    return ()


def initial_status(capability: str) -> Optional[str]:
    if capability == 'curtain':
        return 'down'
    if capability in ACTUATOR_CAPABILITIES:
        return 'off'
    return None


def _finite(value, name: str) -> float:
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise ValidationError(f"{name} must be a number, got {value!r}")
    if not math.isfinite(value):
        raise ValidationError(f"{name} must be finite")
    return value


@dataclass(frozen=True)
class NodeRecord:
    id: str
    kind: str
    room: str
    capability: str
    status: Optional[str] = None

    def __post_init__(self):
        if not self.id:
            raise ValidationError("node id is required")
        if self.kind not in NODE_KINDS:
            raise ValidationError(f"node '{self.id}': unknown kind '{self.kind}'")
        expected = 'actuator' if self.capability in ACTUATOR_CAPABILITIES else 'sensor'
        if self.capability not in ACTUATOR_CAPABILITIES + SENSOR_CAPABILITIES:
            raise ValidationError(f"node '{self.id}': unknown capability '{self.capability}'")
        if self.kind != expected:
            raise ValidationError(f"node '{self.id}': a {self.capability} node must be a {expected}")
        if self.status is not None and self.status not in valid_statuses(self.capability):
            raise ValidationError(f"node '{self.id}': status '{self.status}' invalid for {self.capability}")

    @property
    def is_actuator(self) -> bool:
        return self.kind == 'actuator'

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: Dict) -> 'NodeRecord':
        if not isinstance(raw, dict):
            raise ValidationError("node record must be an object")
        try:
            return cls(id=str(raw['id']), kind=str(raw['kind']), room=str(raw['room']),
                       capability=str(raw['capability']), status=raw.get('status'))
        except KeyError as e:
            raise ValidationError(f"node record is missing {e}")


@dataclass(frozen=True)
class SensorReading:
    source: str
    metric: str
    value: float
    room: str
    t: float
    user: Optional[str] = None

    def __post_init__(self):
        if not self.source:
            raise ValidationError("reading source is required")
        if not self.metric:
            raise ValidationError("reading metric is required")
        if not self.room:
            raise ValidationError("reading room stamp is required")
        _finite(self.value, 'value')
        if _finite(self.t, 't') < 0:
            raise ValidationError(f"reading time must be nonnegative, got {self.t}")

    @property
    def unit(self) -> Optional[str]:
        return METRIC_UNITS.get(self.metric)

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: Dict) -> 'SensorReading':
        if not isinstance(raw, dict):
            raise ValidationError("reading must be an object")
        try:
            return cls(source=str(raw['source']), metric=str(raw['metric']), value=_finite(raw['value'], 'value'),
                       room=str(raw['room']), t=_finite(raw['t'], 't'),
                       user=None if raw.get('user') is None else str(raw['user']))
        except KeyError as e:
            raise ValidationError(f"reading is missing {e}")


@dataclass(frozen=True)
class EnvPrefs:
    desired_temperature: float = 22.0
    desired_illuminance: float = 500.0
    hysteresis_temp: float = 0.5
    hysteresis_lux: float = 50.0

    def __post_init__(self):
        if self.hysteresis_temp < 0 or self.hysteresis_lux < 0:
            raise ValidationError("hysteresis values must be >= 0")

    @classmethod
    def from_dict(cls, raw: Optional[Dict]) -> 'EnvPrefs':
        raw = raw or {}
        defaults = cls()
        return cls(**{
            name: _finite(raw.get(name, getattr(defaults, name)), name)
            for name in ('desired_temperature', 'desired_illuminance', 'hysteresis_temp', 'hysteresis_lux')
        })


@dataclass(frozen=True)
class UserRecord:
    id: str
    prefs: EnvPrefs = field(default_factory=EnvPrefs)
    automation_enabled: bool = True

    def __post_init__(self):
        if not self.id:
            raise ValidationError("user id is required")

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: Dict) -> 'UserRecord':
        if not isinstance(raw, dict) or 'id' not in raw:
            raise ValidationError("user record needs an id")
        enabled = raw.get('automation_enabled', True)
        if not isinstance(enabled, bool):
            raise ValidationError(f"automation_enabled must be true or false, got {enabled!r}", user=raw['id'])
        return cls(id=str(raw['id']), prefs=EnvPrefs.from_dict(raw.get('prefs')), automation_enabled=enabled)


@dataclass(frozen=True)
class ActuationRecord:
    t: float
    node: str
    old: Optional[str]
    new: str
    cause: str = 'manual'

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: Dict) -> 'ActuationRecord':
        return cls(t=float(raw['t']), node=str(raw['node']), old=raw.get('old'), new=str(raw['new']),
                   cause=str(raw.get('cause', 'manual')))
