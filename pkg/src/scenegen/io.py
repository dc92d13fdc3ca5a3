"""JSON encoding of scenes and HD maps.

Floats are written with ``repr`` precision so ``decode(encode(x)) == x`` exactly.
Decoding validates everything and raises :class:`SceneParseError` naming the
offending JSON path.
"""
from __future__ import annotations

import json
import math
import os
from pathlib import Path
from typing import Any

from .scene import (
    TWO_PI, Actor, ActorClass, Centerline, DividerType, HDMap, LanePolygon, LaneSegment,
    LaneType, OrientedBox, Scene, SDVState, TrafficLight, TurnType, in_region,
)


class SceneParseError(ValueError):
    def __init__(self, path: str, message: str):
        self.path = path
        self.message = message
        super().__init__(f"{path or '<root>'}: {message}")


# --- encoding ---------------------------------------------------------------

def actor_to_dict(a: Actor) -> dict:
    d: dict[str, Any] = {"class": a.cls.label, "x": a.x, "y": a.y}
    if a.box is not None:
        d.update(width=a.box.width, length=a.box.length, heading=a.box.heading)
    d.update(speed=a.speed, direction=a.direction)
    return d


def _pts(points) -> list:
    return [[x, y] for x, y in points]


def map_to_dict(m: HDMap) -> dict:
    return {
        "lane_segments": [
            {"id": s.id, "polygon": _pts(s.polygon), "orientation": s.orientation,
             "speed_limit": s.speed_limit, "traffic_light": s.traffic_light.value,
             "successors": list(s.successors), "lane_type": s.lane_type.value,
             "centerline": _pts(s.centerline)}
            for s in m.lane_segments],
        "centerlines": [
            {"points": _pts(c.points), "divider": c.divider.value, "turn": c.turn.value,
             "intersection": c.intersection, "controlled": c.controlled}
            for c in m.centerlines],
        "drivable_area": [_pts(p) for p in m.drivable_area],
        "crosswalks": [_pts(p) for p in m.crosswalks],
        "lane_polygons": [{"polygon": _pts(lp.polygon), "lane_type": lp.lane_type.value}
                          for lp in m.lane_polygons],
    }


def scene_to_dict(s: Scene, map_ref: str | None = None) -> dict:
    return {
        "region_m": s.region,
        "sdv": actor_to_dict(s.sdv.actor),
        "actors": [actor_to_dict(a) for a in s.actors],
        "map": map_ref if map_ref is not None else map_to_dict(s.map),
    }


def dumps(obj: dict, indent: int | None = None) -> str:
    return json.dumps(obj, indent=indent, allow_nan=False)


# --- decoding ---------------------------------------------------------------

def _field(d: Any, key: str, path: str, required: bool = True, default=None):
    if not isinstance(d, dict):
        raise SceneParseError(path, "expected an object")
    if key not in d:
        if required:
            raise SceneParseError(f"{path}.{key}" if path else key, "missing field")
        return default
    return d[key]


def _num(v: Any, path: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise SceneParseError(path, "expected a number")
    v = float(v)
    if not math.isfinite(v):
        raise SceneParseError(path, "non-finite number")
    return v


def _angle(v: Any, path: str, name: str) -> float:
    v = _num(v, path)
    if not (0.0 <= v < TWO_PI):
        raise SceneParseError(path, f"{name} out of range")
    return v


def _enum(cls, v: Any, path: str):
    try:
        return cls(v)
    except ValueError:
        raise SceneParseError(path, f"unknown {cls.__name__} tag {v!r}") from None


def _points(v: Any, path: str) -> list:
    if not isinstance(v, list):
        raise SceneParseError(path, "expected a list of [x, y] pairs")
    out = []
    for i, p in enumerate(v):
        if not isinstance(p, list) or len(p) != 2:
            raise SceneParseError(f"{path}[{i}]", "expected an [x, y] pair")
        out.append((_num(p[0], f"{path}[{i}][0]"), _num(p[1], f"{path}[{i}][1]")))
    return out


def _polygon(v: Any, path: str):
    pts = _points(v, path)
    if len(pts) < 3:
        raise SceneParseError(path, "polygon needs at least 3 vertices")
    return pts


_CLASS_TAGS = {c.label: c for c in (ActorClass.VEHICLE, ActorClass.PEDESTRIAN, ActorClass.BICYCLIST)}


def actor_from_dict(d: Any, path: str = "actor") -> Actor:
    tag = _field(d, "class", path)
    if tag not in _CLASS_TAGS:
        raise SceneParseError(f"{path}.class", f"unknown actor class {tag!r}")
    cls = _CLASS_TAGS[tag]
    x = _num(_field(d, "x", path), f"{path}.x")
    y = _num(_field(d, "y", path), f"{path}.y")
    box = None
    if cls.has_box:
        w = _num(_field(d, "width", path), f"{path}.width")
        l = _num(_field(d, "length", path), f"{path}.length")
        if w <= 0 or l <= 0:
            raise SceneParseError(path, "box size must be positive")
        box = OrientedBox(w, l, _angle(_field(d, "heading", path), f"{path}.heading", "heading"))
    else:
        for key in ("width", "length", "heading"):
            if key in d:
                raise SceneParseError(f"{path}.{key}", "pedestrians carry no box")
    speed = _num(_field(d, "speed", path, False, 0.0), f"{path}.speed")
    if speed < 0:
        raise SceneParseError(f"{path}.speed", "speed must be non-negative")
    direction = _angle(_field(d, "direction", path, False, 0.0), f"{path}.direction", "direction")
    if speed == 0.0 and direction != 0.0:
        raise SceneParseError(f"{path}.direction", "zero-speed actors must have direction 0")
    return Actor(cls, x, y, box, speed, direction)


def map_from_dict(d: Any, path: str = "map") -> HDMap:
    if not isinstance(d, dict):
        raise SceneParseError(path, "expected an object")
    segments = []
    for i, s in enumerate(_field(d, "lane_segments", path, False, [])):
        p = f"{path}.lane_segments[{i}]"
        sid = _field(s, "id", p)
        if isinstance(sid, bool) or not isinstance(sid, int):
            raise SceneParseError(f"{p}.id", "expected an integer id")
        succ = _field(s, "successors", p, False, [])
        if not isinstance(succ, list) or any(isinstance(x, bool) or not isinstance(x, int) for x in succ):
            raise SceneParseError(f"{p}.successors", "expected a list of integer ids")
        limit = _num(_field(s, "speed_limit", p), f"{p}.speed_limit")
        if limit < 0:
            raise SceneParseError(f"{p}.speed_limit", "speed limit must be non-negative")
        cl = _field(s, "centerline", p, False, [])
        segments.append(LaneSegment(
            id=sid,
            polygon=_polygon(_field(s, "polygon", p), f"{p}.polygon"),
            orientation=_angle(_field(s, "orientation", p), f"{p}.orientation", "orientation"),
            speed_limit=limit,
            traffic_light=_enum(TrafficLight, _field(s, "traffic_light", p, False, "unknown"),
                                f"{p}.traffic_light"),
            successors=tuple(succ),
            lane_type=_enum(LaneType, _field(s, "lane_type", p, False, "straight"), f"{p}.lane_type"),
            centerline=tuple(_points(cl, f"{p}.centerline")) if cl else (),
        ))
    known = {s.id for s in segments}
    if len(known) != len(segments):
        raise SceneParseError(f"{path}.lane_segments", "duplicate lane segment id")
    for i, s in enumerate(segments):
        for j, succ in enumerate(s.successors):
            if succ not in known:
                raise SceneParseError(f"{path}.lane_segments[{i}].successors[{j}]",
                                      f"unknown successor id {succ}")
    centerlines = []
    for i, c in enumerate(_field(d, "centerlines", path, False, [])):
        p = f"{path}.centerlines[{i}]"
        pts = _points(_field(c, "points", p), f"{p}.points")
        if len(pts) < 2:
            raise SceneParseError(f"{p}.points", "polyline needs at least 2 vertices")
        centerlines.append(Centerline(
            points=tuple(pts),
            divider=_enum(DividerType, _field(c, "divider", p, False, "forbidden"), f"{p}.divider"),
            turn=_enum(TurnType, _field(c, "turn", p, False, "none"), f"{p}.turn"),
            intersection=bool(_field(c, "intersection", p, False, False)),
            controlled=bool(_field(c, "controlled", p, False, False)),
        ))
    lane_polys = []
    for i, lp in enumerate(_field(d, "lane_polygons", path, False, [])):
        p = f"{path}.lane_polygons[{i}]"
        lane_polys.append(LanePolygon(_polygon(_field(lp, "polygon", p), f"{p}.polygon"),
                                      _enum(LaneType, _field(lp, "lane_type", p, False, "straight"),
                                            f"{p}.lane_type")))
    drivable = [_polygon(q, f"{path}.drivable_area[{i}]")
                for i, q in enumerate(_field(d, "drivable_area", path, False, []))]
    crosswalks = [_polygon(q, f"{path}.crosswalks[{i}]")
                  for i, q in enumerate(_field(d, "crosswalks", path, False, []))]
    return HDMap(tuple(segments), tuple(centerlines), tuple(drivable), tuple(crosswalks), tuple(lane_polys))


def scene_from_dict(d: Any, base_dir: str | os.PathLike | None = None) -> Scene:
    if not isinstance(d, dict):
        raise SceneParseError("", "expected an object")
    region = _num(_field(d, "region_m", "", False, 40.0), "region_m")
    if region <= 0:
        raise SceneParseError("region_m", "region must be positive")
    sdv_actor = actor_from_dict(_field(d, "sdv", ""), "sdv")
    if sdv_actor.cls is not ActorClass.VEHICLE:
        raise SceneParseError("sdv.class", "the SDV must be a vehicle")
    if sdv_actor.x != 0.0 or sdv_actor.y != 0.0:
        raise SceneParseError("sdv", "the SDV must sit at the origin")
    raw_actors = _field(d, "actors", "", False, [])
    if not isinstance(raw_actors, list):
        raise SceneParseError("actors", "expected a list")
    actors = []
    for i, a in enumerate(raw_actors):
        actor = actor_from_dict(a, f"actors[{i}]")
        if not in_region(actor.x, actor.y, region):
            raise SceneParseError(f"actors[{i}]", "position outside the region")
        actors.append(actor)
    m = _field(d, "map", "", False, None)
    if m is None:
        hdmap = HDMap()
    elif isinstance(m, str):
        map_path = Path(base_dir or ".") / m
        hdmap = load_map(map_path)
    else:
        hdmap = map_from_dict(m)
    return Scene(SDVState(sdv_actor), hdmap, tuple(actors), region)


def loads_scene(text: str, base_dir=None) -> Scene:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise SceneParseError("", f"malformed JSON: {e}") from None
    return scene_from_dict(d, base_dir)


def loads_map(text: str) -> HDMap:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise SceneParseError("", f"malformed JSON: {e}") from None
    return map_from_dict(d, "")


def load_scene(path: str | os.PathLike) -> Scene:
    path = Path(path)
    return loads_scene(path.read_text(), base_dir=path.parent)


def load_map(path: str | os.PathLike) -> HDMap:
    return loads_map(Path(path).read_text())


def save_scene(path: str | os.PathLike, scene: Scene, map_ref: str | None = None) -> None:
    Path(path).write_text(dumps(scene_to_dict(scene, map_ref)))


def save_map(path: str | os.PathLike, m: HDMap) -> None:
    Path(path).write_text(dumps(map_to_dict(m)))
