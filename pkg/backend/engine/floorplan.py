"""
Floor Plan - Indoor geometry (rooms, walls, access points)

Answers the two geometric questions the tracker and simulator ask:
which room a point is in, and whether a move crosses a wall. Boundary
points count as inside a room and touching a wall counts as crossing,
so particles can never slip through geometry on an edge case.

Furniture is modelled as extra wall segments.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import shapely
from shapely.geometry import LineString, MultiLineString, Point, Polygon, box

from services.errors import ParseError, ValidationError

logger = logging.getLogger(__name__)

# Tolerance (meters) for on-boundary / touching tests
EPSILON = 1e-9

ROOM_KINDS = ('office', 'corridor')


@dataclass(frozen=True)
class Point2D:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValidationError(f"non-finite coordinates ({self.x}, {self.y})")

    def as_tuple(self) -> Tuple[float, float]:
        return (self.x, self.y)

    def distance_to(self, other: 'Point2D') -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


@dataclass(frozen=True)
class WallSegment:
    a: Point2D
    b: Point2D

    def __post_init__(self):
        if self.a == self.b:
            raise ValidationError(f"zero-length wall at ({self.a.x}, {self.a.y})")


@dataclass(frozen=True)
class Room:
    id: str
    name: str
    polygon: Tuple[Point2D, ...]
    kind: str = 'office'

    @property
    def shape(self) -> Polygon:
        return Polygon([p.as_tuple() for p in self.polygon])

    @property
    def centroid(self) -> Point2D:
        c = self.shape.centroid
        return Point2D(c.x, c.y)


@dataclass(frozen=True)
class ApPlacement:
    ap_id: str
    position: Point2D


@dataclass(frozen=True)
class Bounds:
    min_x: float
    min_y: float
    max_x: float
    max_y: float

    def contains(self, p: Point2D) -> bool:
        return (self.min_x - EPSILON <= p.x <= self.max_x + EPSILON
                and self.min_y - EPSILON <= p.y <= self.max_y + EPSILON)


@dataclass(frozen=True)
class FloorPlan:
    rooms: Tuple[Room, ...]
    walls: Tuple[WallSegment, ...]
    aps: Tuple[ApPlacement, ...]
    bounds: Bounds
    # derived geometry, built once
    _room_shapes: tuple = field(init=False, repr=False, compare=False)
    _walls_shape: object = field(init=False, repr=False, compare=False)
    _allowed_shape: object = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ordered = tuple(sorted(self.rooms, key=lambda r: r.id))
        shapes = tuple(r.shape for r in ordered)
        for s in shapes:
            shapely.prepare(s)
        object.__setattr__(self, '_room_shapes', tuple(zip((r.id for r in ordered), shapes)))

        walls = MultiLineString([[w.a.as_tuple(), w.b.as_tuple()] for w in self.walls]) if self.walls else None
        if walls is not None:
            shapely.prepare(walls)
        object.__setattr__(self, '_walls_shape', walls)

        allowed = shapely.union_all(shapes) if shapes else Polygon()
        shapely.prepare(allowed)
        object.__setattr__(self, '_allowed_shape', allowed)

    # ===== Lookups =====

    @property
    def ap_ids(self) -> List[str]:
        """AP order used for fingerprint vectors (document order)"""
        return [ap.ap_id for ap in self.aps]

    @property
    def room_ids(self) -> List[str]:
        return sorted(r.id for r in self.rooms)

    def room(self, room_id: str) -> Room:
        for r in self.rooms:
            if r.id == room_id:
                return r
        raise ValidationError(f"unknown room '{room_id}'")

    def has_room(self, room_id: str) -> bool:
        return any(r.id == room_id for r in self.rooms)

    def ap_position(self, ap_id: str) -> Optional[Point2D]:
        for ap in self.aps:
            if ap.ap_id == ap_id:
                return ap.position
        return None

    @property
    def area(self) -> float:
        return sum(shape.area for _, shape in self._room_shapes)

    @property
    def allowed_shape(self):
        return self._allowed_shape


# ===== Loading / serialization =====

def _point(raw, where: str) -> Point2D:
    try:
        x, y = raw
        return Point2D(float(x), float(y))
    except ValidationError:
        raise
    except (TypeError, ValueError):
        raise ValidationError(f"{where}: expected an [x, y] pair, got {raw!r}")


def _parse_document(doc: Dict) -> FloorPlan:
    if not isinstance(doc, dict):
        raise ParseError("floor plan must be a JSON object")
    for key in ('bounds', 'rooms'):
        if key not in doc:
            raise ParseError(f"floor plan is missing '{key}'")

    raw_bounds = doc['bounds']
    try:
        if isinstance(raw_bounds, dict):
            bounds = Bounds(float(raw_bounds['min_x']), float(raw_bounds['min_y']),
                            float(raw_bounds['max_x']), float(raw_bounds['max_y']))
        else:
            bounds = Bounds(*(float(v) for v in raw_bounds))
    except (KeyError, TypeError, ValueError):
        raise ValidationError(f"bounds: expected [min_x, min_y, max_x, max_y], got {raw_bounds!r}")
    if not (bounds.min_x < bounds.max_x and bounds.min_y < bounds.max_y):
        raise ValidationError(f"bounds: empty rectangle {raw_bounds!r}")

    if not isinstance(doc['rooms'], list):
        raise ParseError("rooms must be a JSON list")
    rooms = []
    for i, raw in enumerate(doc['rooms']):
        if not isinstance(raw, dict):
            raise ParseError(f"room #{i}: expected an object, got {raw!r}", entity=f"room#{i}")
        room_id = str(raw.get('id', ''))
        if not room_id:
            raise ValidationError("room without id")
        vertices = [_point(v, f"room '{room_id}'") for v in raw.get('vertices', [])]
        # a repeated closing vertex is accepted
        if len(vertices) > 1 and vertices[0] == vertices[-1]:
            vertices = vertices[:-1]
        if len(vertices) < 3:
            raise ValidationError(f"room '{room_id}': polygon needs at least 3 vertices, got {len(vertices)}",
                                  entity=room_id)
        kind = raw.get('kind', 'office')
        if kind not in ROOM_KINDS:
            raise ValidationError(f"room '{room_id}': unknown kind '{kind}'", entity=room_id)
        rooms.append(Room(id=room_id, name=str(raw.get('name', room_id)), polygon=tuple(vertices), kind=kind))

    walls = []
    for i, raw in enumerate(doc.get('walls', [])):
        try:
            a, b = raw
        except (TypeError, ValueError):
            raise ValidationError(f"wall #{i}: expected a pair of points", entity=f"wall#{i}")
        try:
            walls.append(WallSegment(_point(a, f"wall #{i}"), _point(b, f"wall #{i}")))
        except ValidationError as e:
            raise ValidationError(f"wall #{i}: {e}", entity=f"wall#{i}")

    aps = []
    for i, raw in enumerate(doc.get('aps', [])):
        if isinstance(raw, dict):
            ap_id, position = raw.get('id'), raw.get('position')
        else:
            try:
                ap_id, position = raw
            except (TypeError, ValueError):
                raise ParseError(f"ap #{i}: expected an object or an [id, position] pair, got {raw!r}",
                                 entity=f"ap#{i}")
        if not ap_id:
            raise ParseError(f"ap #{i}: missing id", entity=f"ap#{i}")
        aps.append(ApPlacement(str(ap_id), _point(position, f"ap '{ap_id}'")))

    _validate(rooms, walls, aps, bounds)
    return FloorPlan(rooms=tuple(rooms), walls=tuple(walls), aps=tuple(aps), bounds=bounds)


def _validate(rooms: Sequence[Room], walls: Sequence[WallSegment], aps: Sequence[ApPlacement], bounds: Bounds):
    seen = set()
    for r in rooms:
        if r.id in seen:
            raise ValidationError(f"duplicate room id '{r.id}'", entity=r.id)
        seen.add(r.id)

    seen = set()
    for ap in aps:
        if ap.ap_id in seen:
            raise ValidationError(f"duplicate ap id '{ap.ap_id}'", entity=ap.ap_id)
        seen.add(ap.ap_id)
        if not bounds.contains(ap.position):
            raise ValidationError(f"ap '{ap.ap_id}' lies outside the plan bounds", entity=ap.ap_id)

    frame = box(bounds.min_x, bounds.min_y, bounds.max_x, bounds.max_y).buffer(EPSILON)
    shapes = []
    for r in rooms:
        shape = r.shape
        if not shape.is_valid or not shape.exterior.is_simple or shape.area <= 0:
            raise ValidationError(f"room '{r.id}': polygon is not simple", entity=r.id)
        if not frame.covers(shape):
            raise ValidationError(f"room '{r.id}' extends outside the plan bounds", entity=r.id)
        shapes.append((r.id, shape))

    for i, (id_a, a) in enumerate(shapes):
        for id_b, b in shapes[i + 1:]:
            if a.relate_pattern(b, 'T********'):
                raise ValidationError(f"rooms '{id_a}' and '{id_b}' overlap", entity=f"{id_a},{id_b}")

    for i, w in enumerate(walls):
        if not (bounds.contains(w.a) and bounds.contains(w.b)):
            raise ValidationError(f"wall #{i} extends outside the plan bounds", entity=f"wall#{i}")


def load_floorplan(source) -> FloorPlan:
    """
    Load a floor plan document.

    Args:
        source: bytes, str, a path-like ending in .json, or a binary/text file object

    Returns:
        FloorPlan satisfying all geometric invariants
    """
    if hasattr(source, 'read'):
        source = source.read()
    if isinstance(source, (bytes, bytearray)):
        source = bytes(source).decode('utf-8')
    try:
        doc = json.loads(source)
    except (json.JSONDecodeError, TypeError) as e:
        raise ParseError(f"floor plan is not valid JSON: {e}")
    plan = _parse_document(doc)
    logger.info(f"Loaded floor plan: {len(plan.rooms)} rooms, {len(plan.walls)} walls, "
                f"{len(plan.aps)} APs, {plan.area:.1f} m²")
    return plan


def load_floorplan_file(path) -> FloorPlan:
    with open(path, 'rb') as f:
        return load_floorplan(f)


def floorplan_to_dict(plan: FloorPlan) -> Dict:
    b = plan.bounds
    return {
        'bounds': [b.min_x, b.min_y, b.max_x, b.max_y],
        'rooms': [
            {'id': r.id, 'name': r.name, 'kind': r.kind, 'vertices': [[p.x, p.y] for p in r.polygon]}
            for r in plan.rooms
        ],
        'walls': [[[w.a.x, w.a.y], [w.b.x, w.b.y]] for w in plan.walls],
        'aps': [{'id': ap.ap_id, 'position': [ap.position.x, ap.position.y]} for ap in plan.aps],
    }


def serialize_floorplan(plan: FloorPlan) -> bytes:
    return json.dumps(floorplan_to_dict(plan), indent=2).encode('utf-8')


# ===== Queries =====

def room_at(plan: FloorPlan, p: Point2D) -> Optional[str]:
    """Room containing p (boundary inclusive, lowest id wins on shared edges)"""
    if not plan.bounds.contains(p):
        return None
    pt = Point(p.x, p.y)
    for room_id, shape in plan._room_shapes:
        if shapely.dwithin(shape, pt, EPSILON):
            return room_id
    return None


def rooms_at(plan: FloorPlan, xy: np.ndarray) -> np.ndarray:
    """
    Vectorized room_at over an (N, 2) array.

    Returns an object array of room ids, None where a point is in no room.
    """
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    result = np.full(len(xy), None, dtype=object)
    if len(xy) == 0:
        return result
    points = shapely.points(xy)
    unresolved = np.ones(len(xy), dtype=bool)
    for room_id, shape in plan._room_shapes:
        hit = unresolved & shapely.dwithin(shape, points, EPSILON)
        result[hit] = room_id
        unresolved &= ~hit
    return result


def in_allowed_space(plan: FloorPlan, xy: np.ndarray) -> np.ndarray:
    """Boolean mask of points lying in some room"""
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    if len(xy) == 0:
        return np.zeros(0, dtype=bool)
    return shapely.dwithin(plan.allowed_shape, shapely.points(xy), EPSILON)


def _segments(starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    degenerate = np.all(starts == ends, axis=1)
    geoms = np.empty(len(starts), dtype=object)
    if np.any(~degenerate):
        geoms[~degenerate] = shapely.linestrings(np.stack([starts[~degenerate], ends[~degenerate]], axis=1))
    if np.any(degenerate):
        geoms[degenerate] = shapely.points(starts[degenerate])
    return geoms


def crosses_walls(plan: FloorPlan, starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    """Vectorized crosses_wall over (N, 2) start and end arrays"""
    starts = np.asarray(starts, dtype=float).reshape(-1, 2)
    ends = np.asarray(ends, dtype=float).reshape(-1, 2)
    if plan._walls_shape is None or len(starts) == 0:
        return np.zeros(len(starts), dtype=bool)
    return shapely.dwithin(_segments(starts, ends), plan._walls_shape, EPSILON)


def crosses_wall(plan: FloorPlan, start: Point2D, end: Point2D) -> bool:
    """
    True when the segment start -> end touches any wall.

    Touching an endpoint and collinear overlap both count; a degenerate
    segment crosses iff the point lies on a wall.
    """
    if plan._walls_shape is None:
        return False
    if start == end:
        geom = Point(start.x, start.y)
    else:
        geom = LineString([start.as_tuple(), end.as_tuple()])
    return bool(shapely.dwithin(geom, plan._walls_shape, EPSILON))


def sample_points_in(shape, n: int, rng: np.random.Generator, max_rounds: int = 1000) -> np.ndarray:
    """Uniform rejection sampling of n points inside a shapely geometry"""
    if n <= 0:
        return np.zeros((0, 2))
    min_x, min_y, max_x, max_y = shape.bounds
    accepted = []
    count = 0
    for _ in range(max_rounds):
        batch = max(2 * (n - count), 16)
        xy = np.column_stack([rng.uniform(min_x, max_x, batch), rng.uniform(min_y, max_y, batch)])
        keep = xy[shapely.contains_xy(shape, xy[:, 0], xy[:, 1])]
        accepted.append(keep)
        count += len(keep)
        if count >= n:
            return np.concatenate(accepted)[:n]
    raise ValidationError("could not sample points inside the requested region")
