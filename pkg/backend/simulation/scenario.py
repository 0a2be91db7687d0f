"""
Experiment scenarios - floor plan, true AP calibrations, walking path,
checkpoints and the phone profiles the walk is repeated with
"""

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from shapely.geometry import LineString

from engine.floorplan import FloorPlan, Point2D, crosses_wall, load_floorplan, load_floorplan_file, room_at
from engine.ranging import ApCalibration
from services.errors import NotFoundError, ParseError, ValidationError

logger = logging.getLogger(__name__)

RSS_MODELS = ('nlr', 'log_distance')


@dataclass(frozen=True)
class PhoneProfile:
    name: str
    rss_bias: float = 0.0
    rss_noise_sigma: float = 2.0
    imu_accel_noise_sigma: float = 0.1
    scan_interval: float = 1.0

    def __post_init__(self):
        if self.rss_noise_sigma < 0 or self.imu_accel_noise_sigma < 0:
            raise ValidationError(f"profile '{self.name}': sigmas must be >= 0")
        if not self.scan_interval > 0:
            raise ValidationError(f"profile '{self.name}': scan_interval must be > 0")


# Noise knobs tuned for the demo deployment, not measured hardware values
DEFAULT_PROFILES = (
    PhoneProfile('phone-a', rss_bias=0.0, rss_noise_sigma=2.0, imu_accel_noise_sigma=0.10),
    PhoneProfile('phone-b', rss_bias=-2.0, rss_noise_sigma=2.5, imu_accel_noise_sigma=0.15),
    PhoneProfile('phone-c', rss_bias=1.0, rss_noise_sigma=2.2, imu_accel_noise_sigma=0.12),
)


@dataclass(frozen=True)
class Checkpoint:
    index: int
    point: Point2D
    expected_room: str


@dataclass(frozen=True)
class BatteryTimeline:
    """Scripted battery percent over a run: start level, linear drain"""
    start: float = 100.0
    drain_per_hour: float = 0.0

    def at(self, t: float) -> float:
        return max(0.0, min(100.0, self.start - self.drain_per_hour * t / 3600.0))


@dataclass(frozen=True)
class Scenario:
    plan: FloorPlan
    true_calibrations: Tuple[ApCalibration, ...]
    waypoints: Tuple[Point2D, ...]
    checkpoints: Tuple[Checkpoint, ...]
    walk_speed: float = 1.0
    runs: int = 20
    profiles: Tuple[PhoneProfile, ...] = DEFAULT_PROFILES
    rng_seed: int = 0
    stride_length: float = 0.7
    points_per_room: int = 40
    rss_model: str = 'nlr'
    battery: BatteryTimeline = field(default_factory=BatteryTimeline)
    user: str = 'user-1'

    def __post_init__(self):
        if not self.walk_speed > 0:
            raise ValidationError(f"walk_speed must be > 0, got {self.walk_speed}")
        if self.runs < 1:
            raise ValidationError(f"runs must be >= 1, got {self.runs}")
        if not self.profiles:
            raise ValidationError("scenario needs at least one phone profile")
        if self.rss_model not in RSS_MODELS:
            raise ValidationError(f"unknown rss_model '{self.rss_model}'")

    @property
    def path(self) -> Optional[LineString]:
        if len(self.waypoints) < 2:
            return None
        return LineString([p.as_tuple() for p in self.waypoints])

    def calibration(self, ap_id: str) -> ApCalibration:
        for cal in self.true_calibrations:
            if cal.ap_id == ap_id:
                return cal
        raise ValidationError(f"no true calibration for access point '{ap_id}'")

    def with_overrides(self, **changes) -> 'Scenario':
        return replace(self, **changes)


def validate_scenario(s: Scenario) -> None:
    """Path never crosses walls and every checkpoint lies in its expected room"""
    for a, b in zip(s.waypoints, s.waypoints[1:]):
        if crosses_wall(s.plan, a, b):
            raise ValidationError(f"waypoint path ({a.x}, {a.y}) -> ({b.x}, {b.y}) crosses a wall")
    for cp in s.checkpoints:
        room = room_at(s.plan, cp.point)
        if room != cp.expected_room:
            raise ValidationError(
                f"checkpoint {cp.index} at ({cp.point.x}, {cp.point.y}) is in {room}, expected {cp.expected_room}")
    for ap_id in s.plan.ap_ids:
        s.calibration(ap_id)


def _profiles(raw) -> Tuple[PhoneProfile, ...]:
    if raw is None:
        return DEFAULT_PROFILES
    return tuple(PhoneProfile(**p) for p in raw)


def parse_scenario(doc: Dict, base_dir: Path = Path('.')) -> Scenario:
    """
    Scenario document:
        {"plan": "demo_plan.json" | {...}, "calibrations": [{"ap_id", "alpha", "beta"}],
         "waypoints": [[x, y], ...], "checkpoints": [{"index", "point", "room"}],
         "walk_speed", "runs", "seed", "profiles": [{...}], "points_per_room", "battery": {...}}
    """
    try:
        plan_ref = doc['plan']
        if isinstance(plan_ref, dict):
            plan = load_floorplan(json.dumps(plan_ref))
        else:
            plan_path = (base_dir / plan_ref)
            if not plan_path.exists():
                raise NotFoundError(f"floor plan file not found: {plan_path}")
            plan = load_floorplan_file(plan_path)

        scenario = Scenario(
            plan=plan,
            true_calibrations=tuple(ApCalibration(str(c['ap_id']), float(c['alpha']), float(c['beta']))
                                    for c in doc['calibrations']),
            waypoints=tuple(Point2D(float(x), float(y)) for x, y in doc['waypoints']),
            checkpoints=tuple(Checkpoint(int(c['index']), Point2D(*map(float, c['point'])), str(c['room']))
                              for c in doc.get('checkpoints', [])),
            walk_speed=float(doc.get('walk_speed', 1.0)),
            runs=int(doc.get('runs', 20)),
            profiles=_profiles(doc.get('profiles')),
            rng_seed=int(doc.get('seed', 0)),
            stride_length=float(doc.get('stride_length', 0.7)),
            points_per_room=int(doc.get('points_per_room', 40)),
            rss_model=str(doc.get('rss_model', 'nlr')),
            battery=BatteryTimeline(**doc.get('battery', {})),
            user=str(doc.get('user', 'user-1')),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"scenario: {e}")
    validate_scenario(scenario)
    return scenario


def load_scenario_file(path) -> Scenario:
    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"scenario file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as e:
        raise ParseError(f"scenario {path}: {e}")
    scenario = parse_scenario(doc, path.parent)
    logger.info(f"Loaded scenario {path.name}: {len(scenario.waypoints)} waypoints, "
                f"{len(scenario.checkpoints)} checkpoints, {scenario.runs} runs x {len(scenario.profiles)} profiles")
    return scenario


def path_length(waypoints) -> float:
    return sum(math.hypot(b.x - a.x, b.y - a.y) for a, b in zip(waypoints, waypoints[1:]))
