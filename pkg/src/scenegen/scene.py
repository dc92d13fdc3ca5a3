"""Actors, scenes and HD maps, plus the geometric predicates used everywhere else.

Coordinates are meters in the SDV-centred frame: ``x`` grows to the right,
``y`` grows upwards.  Angles are radians in ``[0, 2*pi)``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi

Point = tuple[float, float]
Polygon = tuple[Point, ...]


def wrap_angle(theta: float) -> float:
    """Map any angle into ``[0, 2*pi)``."""
    r = math.fmod(theta, TWO_PI)
    if r < 0.0:
        r += TWO_PI
    # fmod of a tiny negative number can round up to exactly 2*pi
    if r >= TWO_PI:
        r = 0.0
    return r


class ActorClass(enum.IntEnum):
    VEHICLE = 0
    PEDESTRIAN = 1
    BICYCLIST = 2
    STOP = 3

    @property
    def has_box(self) -> bool:
        return self in (ActorClass.VEHICLE, ActorClass.BICYCLIST)

    @property
    def label(self) -> str:
        return self.name.lower()


PLACEABLE = (ActorClass.VEHICLE, ActorClass.PEDESTRIAN, ActorClass.BICYCLIST)
BOXED = (ActorClass.VEHICLE, ActorClass.BICYCLIST)


@dataclass(frozen=True, slots=True)
class OrientedBox:
    width: float
    length: float
    heading: float

    def __post_init__(self):
        if not (self.width > 0 and self.length > 0):
            raise ValueError(f"box size must be positive, got {self.width}x{self.length}")
        if not (0.0 <= self.heading < TWO_PI):
            raise ValueError(f"heading out of range: {self.heading}")


@dataclass(frozen=True, slots=True)
class Actor:
    cls: ActorClass
    x: float
    y: float
    box: OrientedBox | None = None
    speed: float = 0.0
    direction: float = 0.0

    def __post_init__(self):
        if self.cls is ActorClass.STOP:
            raise ValueError("the stop token is never a placed actor")
        if self.cls.has_box != (self.box is not None):
            raise ValueError(f"{self.cls.label} {'requires' if self.cls.has_box else 'cannot have'} a box")
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError("actor position must be finite")
        if not (self.speed >= 0.0 and math.isfinite(self.speed)):
            raise ValueError(f"speed must be finite and non-negative, got {self.speed}")
        if not (0.0 <= self.direction < TWO_PI):
            raise ValueError(f"direction out of range: {self.direction}")
        if self.speed == 0.0 and self.direction != 0.0:
            object.__setattr__(self, "direction", 0.0)

    @property
    def position(self) -> Point:
        return (self.x, self.y)

    @property
    def heading(self) -> float | None:
        return None if self.box is None else self.box.heading

    def corners(self) -> np.ndarray:
        """(4, 2) box corners, counter-clockwise."""
        if self.box is None:
            raise ValueError(f"{self.cls.label} has no bounding box")
        return box_corners(self.x, self.y, self.box.width, self.box.length, self.box.heading)


def box_corners(x: float, y: float, width: float, length: float, heading: float) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    hl, hw = 0.5 * length, 0.5 * width
    local = np.array([[hl, -hw], [hl, hw], [-hl, hw], [-hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([x, y])


@dataclass(frozen=True, slots=True)
class SDVState:
    actor: Actor

    def __post_init__(self):
        if self.actor.cls is not ActorClass.VEHICLE:
            raise ValueError("the SDV must be a vehicle")
        if self.actor.x != 0.0 or self.actor.y != 0.0:
            raise ValueError("the SDV sits at the origin of the scene frame")

    @classmethod
    def default(cls, heading: float = 0.0, speed: float = 0.0) -> "SDVState":
        return cls(Actor(ActorClass.VEHICLE, 0.0, 0.0, OrientedBox(2.0, 4.5, wrap_angle(heading)),
                         speed, wrap_angle(heading) if speed > 0 else 0.0))


# --- HD map -----------------------------------------------------------------

class LaneType(enum.Enum):
    STRAIGHT = "straight"
    LEFT = "left"
    RIGHT = "right"
    BUS = "bus"
    BIKE = "bike"


class DividerType(enum.Enum):
    ALLOWED = "allowed"
    FORBIDDEN = "forbidden"
    MAYBE = "maybe"


class TurnType(enum.Enum):
    NONE = "none"
    LEFT = "left"
    RIGHT = "right"


class TrafficLight(enum.Enum):
    GREEN = "green"
    YELLOW = "yellow"
    RED = "red"
    FLASH_YELLOW = "flash_yellow"
    FLASH_RED = "flash_red"
    UNKNOWN = "unknown"


def _as_ring(points: Iterable[Sequence[float]]) -> Polygon:
    """Counter-clockwise ring without a repeated closing vertex."""
    pts = [(float(p[0]), float(p[1])) for p in points]
    if len(pts) > 1 and pts[0] == pts[-1]:
        pts.pop()
    if len(pts) < 3:
        raise ValueError("polygon needs at least 3 vertices")
    area2 = sum(x0 * y1 - x1 * y0 for (x0, y0), (x1, y1) in zip(pts, pts[1:] + pts[:1]))
    if area2 < 0:
        pts.reverse()
    return tuple(pts)


def _as_polyline(points: Iterable[Sequence[float]]) -> tuple[Point, ...]:
    pts = tuple((float(p[0]), float(p[1])) for p in points)
    if len(pts) < 2:
        raise ValueError("polyline needs at least 2 vertices")
    return pts


@dataclass(frozen=True)
class LanePolygon:
    polygon: Polygon
    lane_type: LaneType = LaneType.STRAIGHT

    def __post_init__(self):
        object.__setattr__(self, "polygon", _as_ring(self.polygon))


@dataclass(frozen=True)
class Centerline:
    points: tuple[Point, ...]
    divider: DividerType = DividerType.FORBIDDEN
    turn: TurnType = TurnType.NONE
    intersection: bool = False
    controlled: bool = False

    def __post_init__(self):
        object.__setattr__(self, "points", _as_polyline(self.points))


@dataclass(frozen=True)
class LaneSegment:
    id: int
    polygon: Polygon
    orientation: float
    speed_limit: float
    traffic_light: TrafficLight = TrafficLight.UNKNOWN
    successors: tuple[int, ...] = ()
    lane_type: LaneType = LaneType.STRAIGHT
    centerline: tuple[Point, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "polygon", _as_ring(self.polygon))
        object.__setattr__(self, "successors", tuple(int(s) for s in self.successors))
        if self.centerline:
            object.__setattr__(self, "centerline", _as_polyline(self.centerline))
        if not (0.0 <= self.orientation < TWO_PI):
            raise ValueError(f"orientation out of range: {self.orientation}")
        if not (self.speed_limit >= 0.0):
            raise ValueError("speed limit must be non-negative")


@dataclass(frozen=True)
class HDMap:
    lane_segments: tuple[LaneSegment, ...] = ()
    centerlines: tuple[Centerline, ...] = ()
    drivable_area: tuple[Polygon, ...] = ()
    crosswalks: tuple[Polygon, ...] = ()
    lane_polygons: tuple[LanePolygon, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "lane_segments", tuple(self.lane_segments))
        object.__setattr__(self, "centerlines", tuple(self.centerlines))
        object.__setattr__(self, "lane_polygons", tuple(self.lane_polygons))
        object.__setattr__(self, "drivable_area", tuple(_as_ring(p) for p in self.drivable_area))
        object.__setattr__(self, "crosswalks", tuple(_as_ring(p) for p in self.crosswalks))
        ids = [s.id for s in self.lane_segments]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate lane segment id")
        known = set(ids)
        for seg in self.lane_segments:
            for succ in seg.successors:
                if succ not in known:
                    raise ValueError(f"lane segment {seg.id} has unknown successor {succ}")

    def segment(self, seg_id: int) -> LaneSegment:
        for seg in self.lane_segments:
            if seg.id == seg_id:
                return seg
        raise KeyError(seg_id)


@dataclass(frozen=True)
class Scene:
    sdv: SDVState
    map: HDMap = field(default_factory=HDMap)
    actors: tuple[Actor, ...] = ()
    region: float = 40.0

    def __post_init__(self):
        object.__setattr__(self, "actors", tuple(self.actors))
        if not self.region > 0:
            raise ValueError("region must be positive")
        for i, a in enumerate(self.actors):
            if not in_region(a.x, a.y, self.region):
                raise ValueError(f"actor {i} at ({a.x}, {a.y}) lies outside the region")

    def with_actors(self, actors: Iterable[Actor]) -> "Scene":
        return replace(self, actors=tuple(actors))


def in_region(x: float, y: float, region: float) -> bool:
    # half-open so every in-region point falls in exactly one quantization bin
    return -region <= x < region and -region <= y < region


# --- predicates -------------------------------------------------------------

def canonical_order(actors: Sequence[Actor]) -> list[Actor]:
    """Left-to-right, then bottom-to-top; ties by class tag, then insertion order."""
    keyed = sorted(enumerate(actors), key=lambda ia: (ia[1].x, ia[1].y, int(ia[1].cls), ia[0]))
    return [a for _, a in keyed]


_EPS = 1e-9


def boxes_collide(a: Actor, b: Actor) -> bool:
    """Separating-axis test on two oriented boxes. Touching edges do not collide."""
    ca, cb = a.corners(), b.corners()
    for corners in (ca, cb):
        edges = np.roll(corners, -1, axis=0) - corners
        for ex, ey in edges[:2]:
            axis = np.array([-ey, ex])
            pa, pb = ca @ axis, cb @ axis
            scale = _EPS * max(1.0, float(np.abs(axis).max()))
            if pa.max() <= pb.min() + scale or pb.max() <= pa.min() + scale:
                return False
    return True


def collides_with_any(actor: Actor, others: Iterable[Actor]) -> bool:
    if actor.box is None:
        return False
    reach = 0.5 * math.hypot(actor.box.width, actor.box.length)
    for other in others:
        if other.box is None:
            continue
        r2 = reach + 0.5 * math.hypot(other.box.width, other.box.length)
        if abs(other.x - actor.x) > r2 or abs(other.y - actor.y) > r2:
            continue
        if boxes_collide(actor, other):
            return True
    return False


def colliding_pairs(actors: Sequence[Actor]) -> list[tuple[int, int]]:
    boxed = [(i, a) for i, a in enumerate(actors) if a.box is not None]
    out = []
    for n, (i, a) in enumerate(boxed):
        for j, b in boxed[n + 1:]:
            if collides_with_any(a, [b]):
                out.append((i, j))
    return out


# --- rigid motion -----------------------------------------------------------

def _rot(points, c: float, s: float):
    return tuple((c * x - s * y, s * x + c * y) for x, y in points)


def rotate_actor(a: Actor, angle: float) -> Actor:
    c, s = math.cos(angle), math.sin(angle)
    box = None
    if a.box is not None:
        box = replace(a.box, heading=wrap_angle(a.box.heading + angle))
    direction = wrap_angle(a.direction + angle) if a.speed > 0 else 0.0
    return replace(a, x=c * a.x - s * a.y, y=s * a.x + c * a.y, box=box, direction=direction)


def rotate_map(m: HDMap, angle: float) -> HDMap:
    c, s = math.cos(angle), math.sin(angle)
    return HDMap(
        lane_segments=tuple(
            replace(seg, polygon=_rot(seg.polygon, c, s), centerline=_rot(seg.centerline, c, s),
                    orientation=wrap_angle(seg.orientation + angle))
            for seg in m.lane_segments),
        centerlines=tuple(replace(cl, points=_rot(cl.points, c, s)) for cl in m.centerlines),
        drivable_area=tuple(_rot(p, c, s) for p in m.drivable_area),
        crosswalks=tuple(_rot(p, c, s) for p in m.crosswalks),
        lane_polygons=tuple(replace(lp, polygon=_rot(lp.polygon, c, s)) for lp in m.lane_polygons),
    )


def rotate_scene(scene: Scene, angle: float) -> Scene:
    """Rotate everything about the origin.

    Actors carried outside the square region by the rotation are dropped so the
    result is always a valid scene; rotations by multiples of pi/2 drop nothing
    that was strictly inside.
    """
    if angle == 0.0:
        return scene
    sdv = SDVState(rotate_actor(scene.sdv.actor, angle))
    sdv = SDVState(replace(sdv.actor, x=0.0, y=0.0))
    actors = [rotate_actor(a, angle) for a in scene.actors]
    actors = [a for a in actors if in_region(a.x, a.y, scene.region)]
    return Scene(sdv=sdv, map=rotate_map(scene.map, angle), actors=tuple(actors), region=scene.region)
