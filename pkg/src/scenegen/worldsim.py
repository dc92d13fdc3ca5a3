"""Synthetic HD maps, a ground-truth scene sampler, and two heuristic baseline generators.

Maps are built in the SDV frame: the SDV sits at the origin facing +x in the
first eastbound lane.  Roads are laid out in straight (u, v) road coordinates
and then warped (identity for straight roads, a circular arc for curved ones).

* :func:`sample_oracle_scene` is the synthetic "real world" used for training
  and evaluation: lane-following traffic with queues at red lights, cyclists in
  bike lanes, and pedestrians scattered over crosswalks.
* :func:`sample_grammar_scene` places actors along lane centerlines following a
  simple probabilistic grammar.
* :func:`sample_procedural_scene` places actors along routes through the lane
  graph with clearance and time-gap rules, with sizes from a kernel density fit.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.stats import gaussian_kde

from .io import save_map, save_scene
from .scene import (Actor, ActorClass, Centerline, DividerType, HDMap, LanePolygon, LaneSegment, LaneType,
                    OrientedBox, Scene, SDVState, TrafficLight, collides_with_any, in_region, wrap_angle)

LANE_WIDTH = 3.5
BIKE_WIDTH = 1.8
ROAD_HALF_LENGTH = 70.0
SEGMENT_LENGTH = 20.0
STYLES = ("straight", "curved", "intersection")


# --- geometry helpers ---------------------------------------------------------------

def _cumlen(pts: np.ndarray) -> np.ndarray:
    return np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])


def point_at(pts: np.ndarray, s: float) -> tuple[np.ndarray, float]:
    """Point and tangent angle at arc length ``s`` along a polyline (clamped to its ends)."""
    pts = np.asarray(pts, dtype=float)
    cl = _cumlen(pts)
    s = min(max(s, 0.0), cl[-1])
    i = int(np.clip(np.searchsorted(cl, s, side="right") - 1, 0, len(pts) - 2))
    seg = pts[i + 1] - pts[i]
    n = np.linalg.norm(seg)
    t = 0.0 if n == 0 else (s - cl[i]) / n
    return pts[i] + t * seg, math.atan2(seg[1], seg[0])


def polyline_length(pts) -> float:
    return float(_cumlen(np.asarray(pts, dtype=float))[-1])


def point_in_polygon(x: float, y: float, poly) -> bool:
    inside = False
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        if (y0 > y) != (y1 > y) and x < x0 + (y - y0) * (x1 - x0) / (y1 - y0):
            inside = not inside
    return inside


Warp = Callable[[np.ndarray], np.ndarray]


def _identity(p: np.ndarray) -> np.ndarray:
    return p


def _arc_warp(radius: float, sign: float) -> Warp:
    """Bend the u axis into a circle of the given radius, turning left (sign=+1) or right (-1)."""
    def warp(p):
        u, v = p[:, 0], sign * p[:, 1]
        r = radius - v
        phi = u / radius
        return np.stack([r * np.sin(phi), sign * (radius - r * np.cos(phi))], axis=1)
    return warp


def _strip(center_uv: np.ndarray, half_width: float, warp: Warp) -> list:
    """Polygon of a lane strip around a straight road-coordinate centerline."""
    d = center_uv[-1] - center_uv[0]
    nrm = np.array([-d[1], d[0]]) / np.linalg.norm(d)
    left = warp(center_uv + half_width * nrm)
    right = warp(center_uv - half_width * nrm)
    return [tuple(p) for p in np.concatenate([left, right[::-1]])]


def _line_uv(u0: float, u1: float, v: float, step: float = 2.0) -> np.ndarray:
    n = max(2, int(math.ceil(abs(u1 - u0) / step)) + 1)
    return np.stack([np.linspace(u0, u1, n), np.full(n, v)], axis=1)


def _line_uv_vertical(v0: float, v1: float, u: float, step: float = 2.0) -> np.ndarray:
    n = max(2, int(math.ceil(abs(v1 - v0) / step)) + 1)
    return np.stack([np.full(n, u), np.linspace(v0, v1, n)], axis=1)


# --- map construction -----------------------------------------------------------------

@dataclass
class _Lane:
    """A lane as an ordered chain of segment ids plus its full centerline."""
    segment_ids: list[int]
    centerline: np.ndarray
    lane_type: LaneType
    light: TrafficLight = TrafficLight.UNKNOWN
    stop_s: float | None = None  # arc length of the stop line, if controlled


class _MapBuilder:
    def __init__(self, speed_limit: float):
        self.segments: list[LaneSegment] = []
        self.centerlines: list[Centerline] = []
        self.lane_polys: list[LanePolygon] = []
        self.drivable: list = []
        self.crosswalks: list = []
        self.lanes: list[_Lane] = []
        self.speed_limit = speed_limit

    def add_lane(self, center_uv: np.ndarray, warp: Warp, lane_type: LaneType = LaneType.STRAIGHT,
                 width: float = LANE_WIDTH, divider: DividerType = DividerType.FORBIDDEN,
                 cuts: Sequence[tuple[float, TrafficLight, bool]] = (), ) -> _Lane:
        """Add a lane along a straight road-coordinate line, split into segments.

        ``cuts`` lists ``(fraction, light, in_intersection)`` boundaries: each
        piece up to the fraction gets that light and intersection flag.
        """
        total = np.linalg.norm(center_uv[-1] - center_uv[0])
        pieces = list(cuts) or [(1.0, TrafficLight.UNKNOWN, False)]
        ids = []
        start = 0.0
        a, b = center_uv[0], center_uv[-1]
        for frac_end, light, inter in pieces:
            n_sub = max(1, int(round((frac_end - start) * total / SEGMENT_LENGTH)))
            for k in range(n_sub):
                f0 = start + (frac_end - start) * k / n_sub
                f1 = start + (frac_end - start) * (k + 1) / n_sub
                sub = np.stack([a + (b - a) * f for f in np.linspace(f0, f1, max(2, int((f1 - f0) * total / 2) + 1))])
                pts = warp(sub)
                heading = math.atan2(pts[-1, 1] - pts[0, 1], pts[-1, 0] - pts[0, 0]) % (2 * math.pi)
                if heading >= 2 * math.pi:
                    heading = 0.0
                seg_id = len(self.segments)
                self.segments.append(LaneSegment(
                    seg_id, _strip(sub, width / 2, warp), heading, self.speed_limit, light, (), lane_type,
                    tuple(map(tuple, pts))))
                ids.append(seg_id)
            start = frac_end
        for i, j in zip(ids, ids[1:]):
            s = self.segments[i]
            self.segments[i] = LaneSegment(s.id, s.polygon, s.orientation, s.speed_limit, s.traffic_light, (j,),
                                           s.lane_type, s.centerline)
        full = warp(center_uv)
        self.centerlines.append(Centerline(tuple(map(tuple, full)), divider,
                                           intersection=any(c[2] for c in pieces),
                                           controlled=any(c[1] is not TrafficLight.UNKNOWN for c in pieces)))
        self.lane_polys.append(LanePolygon(_strip(center_uv, width / 2, warp), lane_type))
        lane = _Lane(ids, full, lane_type)
        self.lanes.append(lane)
        return lane

    def build(self) -> HDMap:
        return HDMap(tuple(self.segments), tuple(self.centerlines), tuple(self.drivable), tuple(self.crosswalks),
                     tuple(self.lane_polys))


@dataclass(frozen=True)
class MapSpec:
    style: str = "straight"
    lanes: int = 2
    seed: int = 0
    one_way: bool = False
    bike_lanes: bool | None = None   # None: random
    crosswalk: bool | None = None    # straight/curved only; None: random

    def __post_init__(self):
        if self.style not in STYLES:
            raise ValueError(f"unknown map style {self.style!r}")
        if self.lanes < 1:
            raise ValueError("need at least one lane")


@dataclass
class WorldMap:
    """An HD map together with the lane bookkeeping the samplers need."""
    map: HDMap
    lanes: list[_Lane]
    spec: MapSpec

    def segment(self, seg_id: int) -> LaneSegment:
        return self.map.lane_segments[seg_id]


def build_world(spec: MapSpec) -> WorldMap:
    rng = np.random.default_rng(spec.seed)
    limit = float(rng.choice([11.1, 13.9, 16.7]))
    b = _MapBuilder(limit)
    bikes = bool(rng.random() < 0.5) if spec.bike_lanes is None else spec.bike_lanes
    if spec.style == "intersection":
        _intersection(b, spec, rng, bikes)
    else:
        if spec.style == "curved":
            warp = _arc_warp(float(rng.uniform(50.0, 150.0)), float(rng.choice([-1.0, 1.0])))
        else:
            warp = _identity
        want_cw = bool(rng.random() < 0.4) if spec.crosswalk is None else spec.crosswalk
        cw_u = float(rng.uniform(8.0, 30.0) * rng.choice([-1.0, 1.0])) if want_cw else None
        _road(b, spec, warp, bikes, cw_u)
    return WorldMap(b.build(), b.lanes, spec)


def gen_map(spec: MapSpec | dict) -> HDMap:
    """Procedurally build a map from ``{style, lanes, seed, ...}``."""
    if isinstance(spec, dict):
        spec = MapSpec(**spec)
    return build_world(spec).map


def _lane_offsets(spec: MapSpec) -> tuple[list[float], list[float]]:
    """Lateral offsets (road coordinate v) of eastbound and westbound lane centers."""
    if spec.one_way:
        east = [-LANE_WIDTH * i for i in range(spec.lanes)]
        return east, []
    n_e = max(1, spec.lanes - spec.lanes // 2)
    n_w = max(1, spec.lanes // 2)
    return [-LANE_WIDTH * i for i in range(n_e)], [LANE_WIDTH * (j + 1) for j in range(n_w)]


def _road(b: _MapBuilder, spec: MapSpec, warp: Warp, bikes: bool, crosswalk_u: float | None):
    east, west = _lane_offsets(spec)
    L = ROAD_HALF_LENGTH
    for i, v in enumerate(east):
        div = DividerType.ALLOWED if i + 1 < len(east) else DividerType.MAYBE
        b.add_lane(_line_uv(-L, L, v), warp, divider=div if i else
                   (DividerType.FORBIDDEN if west else DividerType.MAYBE))
    for j, v in enumerate(west):
        b.add_lane(_line_uv(L, -L, v), warp, divider=DividerType.FORBIDDEN if j == 0 else DividerType.ALLOWED)
    lo = min(east) - LANE_WIDTH / 2
    hi = (max(west) if west else max(east)) + LANE_WIDTH / 2
    if bikes:
        vb = lo - BIKE_WIDTH / 2
        b.add_lane(_line_uv(-L, L, vb), warp, LaneType.BIKE, BIKE_WIDTH, DividerType.ALLOWED)
        lo -= BIKE_WIDTH
        if west:
            vb = hi + BIKE_WIDTH / 2
            b.add_lane(_line_uv(L, -L, vb), warp, LaneType.BIKE, BIKE_WIDTH, DividerType.ALLOWED)
            hi += BIKE_WIDTH
    mid = np.stack([np.linspace(-L, L, 71), np.full(71, (lo + hi) / 2)], 1)
    b.drivable.append(_strip(mid, (hi - lo) / 2, warp))
    if crosswalk_u is not None:
        cw = np.array([[crosswalk_u, lo], [crosswalk_u, hi]])
        b.crosswalks.append(_strip(cw, 2.0, warp))


def _intersection(b: _MapBuilder, spec: MapSpec, rng: np.random.Generator, bikes: bool):
    n = max(1, spec.lanes // 2)
    cx = float(rng.uniform(14.0, 28.0))
    L = ROAD_HALF_LENGTH
    # horizontal road: eastbound lanes at v = 0, -3.5, ...; westbound above
    e_off = [-LANE_WIDTH * i for i in range(n)]
    w_off = [LANE_WIDTH * (j + 1) for j in range(n)]
    h_lo, h_hi = min(e_off) - LANE_WIDTH / 2, max(w_off) + LANE_WIDTH / 2
    yc = (h_lo + h_hi) / 2
    # vertical road centred on x = cx; northbound on the right (larger x)
    n_off = [cx + LANE_WIDTH * (i + 0.5) for i in range(n)]
    s_off = [cx - LANE_WIDTH * (i + 0.5) for i in range(n)]
    v_lo, v_hi = cx - n * LANE_WIDTH, cx + n * LANE_WIDTH
    horizontal_green = bool(rng.random() < 0.5)
    amber = bool(rng.random() < 0.15)
    go = TrafficLight.YELLOW if amber else TrafficLight.GREEN
    h_light = go if horizontal_green else TrafficLight.RED
    v_light = TrafficLight.RED if horizontal_green else go

    def cuts(length, box_lo, box_hi, light):
        return [(box_lo / length, light, False), (box_hi / length, light, True), (1.0, TrafficLight.UNKNOWN, False)]

    total = 2 * L
    for v in e_off:  # u from -L to L: box spans u in [v_lo, v_hi]
        lane = b.add_lane(_line_uv(-L, L, v), _identity, cuts=cuts(total, v_lo + L, v_hi + L, h_light))
        lane.light, lane.stop_s = h_light, v_lo + L
    for v in w_off:  # u from L to -L
        lane = b.add_lane(_line_uv(L, -L, v), _identity, cuts=cuts(total, L - v_hi, L - v_lo, h_light))
        lane.light, lane.stop_s = h_light, L - v_hi
    y0, y1 = yc - L, yc + L
    for u in n_off:  # northbound, v from y0 to y1
        lane = b.add_lane(_line_uv_vertical(y0, y1, u), _identity, cuts=cuts(total, h_lo - y0, h_hi - y0, v_light))
        lane.light, lane.stop_s = v_light, h_lo - y0
    for u in s_off:
        lane = b.add_lane(_line_uv_vertical(y1, y0, u), _identity, cuts=cuts(total, y1 - h_hi, y1 - h_lo, v_light))
        lane.light, lane.stop_s = v_light, y1 - h_hi
    b.drivable.append([(-L, h_lo), (L, h_lo), (L, h_hi), (-L, h_hi)])
    b.drivable.append([(v_lo, y0), (v_hi, y0), (v_hi, y1), (v_lo, y1)])
    w = 3.0
    b.crosswalks += [
        [(v_lo - w - 0.5, h_lo), (v_lo - 0.5, h_lo), (v_lo - 0.5, h_hi), (v_lo - w - 0.5, h_hi)],
        [(v_hi + 0.5, h_lo), (v_hi + w + 0.5, h_lo), (v_hi + w + 0.5, h_hi), (v_hi + 0.5, h_hi)],
        [(v_lo, h_lo - w - 0.5), (v_hi, h_lo - w - 0.5), (v_hi, h_lo - 0.5), (v_lo, h_lo - 0.5)],
        [(v_lo, h_hi + 0.5), (v_hi, h_hi + 0.5), (v_hi, h_hi + w + 0.5), (v_lo, h_hi + w + 0.5)],
    ]
    if bikes:
        vb = h_lo - BIKE_WIDTH / 2
        lane = b.add_lane(_line_uv(-L, L, vb), _identity, LaneType.BIKE, BIKE_WIDTH, DividerType.ALLOWED,
                          cuts=cuts(total, v_lo + L, v_hi + L, h_light))
        lane.light, lane.stop_s = h_light, v_lo + L


# --- the ground-truth sampler ---------------------------------------------------------------

@dataclass(frozen=True)
class OracleConfig:
    """Parameters of the synthetic world's traffic."""
    vehicle_gap_mean: float = 32.0     # extra spacing between moving vehicles (m)
    queue_gap_mean: float = 1.5        # spacing in a queue at a red light (m)
    stopped_prob: float = 0.15         # chance a vehicle on a free-flowing lane is stationary
    truck_prob: float = 0.1
    lateral_sd: float = 0.15
    heading_sd: float = 0.02
    bicyclist_rate: float = 1.5        # Poisson mean per bike lane
    pedestrian_rate: float = 0.8       # Poisson mean per crosswalk
    pedestrian_moving_prob: float = 0.8
    pedestrian_log_speed: tuple[float, float] = (0.3, 0.4)   # mean and sd of log speed


def _vehicle_box(rng, cfg: OracleConfig) -> tuple[float, float]:
    if rng.random() < cfg.truck_prob:
        return float(np.clip(rng.normal(2.5, 0.1), 2.1, 2.9)), float(np.clip(rng.normal(9.0, 1.2), 6.5, 12.0))
    return float(np.clip(rng.normal(1.9, 0.08), 1.6, 2.2)), float(np.clip(rng.normal(4.6, 0.35), 3.6, 5.6))


def _bicyclist_box(rng) -> tuple[float, float]:
    return float(np.clip(rng.normal(0.7, 0.05), 0.55, 0.85)), float(np.clip(rng.normal(1.8, 0.1), 1.5, 2.1))


def _try_place(actor: Actor, placed: list[Actor], region: float) -> bool:
    if not in_region(actor.x, actor.y, region):
        return False
    if actor.box is not None and collides_with_any(actor, [a for a in placed if a.box is not None]):
        return False
    placed.append(actor)
    return True


def _lane_actor(lane: _Lane, s: float, cls: ActorClass, size, speed: float, rng, cfg: OracleConfig) -> Actor:
    p, tangent = point_at(lane.centerline, s)
    lat = rng.normal(0.0, cfg.lateral_sd if cls is ActorClass.VEHICLE else 0.1)
    x = p[0] - math.sin(tangent) * lat
    y = p[1] + math.cos(tangent) * lat
    heading = wrap_angle(tangent + rng.normal(0.0, cfg.heading_sd))
    direction = wrap_angle(heading + rng.normal(0.0, cfg.heading_sd)) if speed > 0 else 0.0
    return Actor(cls, float(x), float(y), OrientedBox(size[0], size[1], heading), float(speed), direction)


def sample_oracle_scene(world: WorldMap, seed: int, cfg: OracleConfig = OracleConfig(),
                        sdv_speed: float | None = None, region: float = 40.0) -> Scene:
    """Draw a scene from the synthetic world's traffic model."""
    rng = np.random.default_rng(seed)
    limit = world.map.lane_segments[0].speed_limit
    first = world.lanes[0]
    sdv_stop = first.light is TrafficLight.RED and first.stop_s is not None
    if sdv_speed is None:
        sdv_speed = 0.0 if sdv_stop or rng.random() < 0.1 else float(limit * rng.uniform(0.6, 1.0))
    sdv = SDVState.default(0.0, sdv_speed)
    placed: list[Actor] = [sdv.actor]

    for lane in world.lanes:
        length = polyline_length(lane.centerline)
        if lane.lane_type is LaneType.BIKE:
            for _ in range(rng.poisson(cfg.bicyclist_rate)):
                s = rng.uniform(0.0, length)
                moving = not (lane.light is TrafficLight.RED and lane.stop_s is not None
                              and lane.stop_s - 10 < s < lane.stop_s)
                speed = float(rng.uniform(2.5, 6.5)) if moving and rng.random() < 0.9 else 0.0
                _try_place(_lane_actor(lane, s, ActorClass.BICYCLIST, _bicyclist_box(rng), speed, rng, cfg),
                           placed, region)
            continue
        red = lane.light is TrafficLight.RED and lane.stop_s is not None
        flow = float(limit * rng.uniform(0.7, 1.0))
        if red:
            # queue backwards from the stop line; nothing inside or past the junction
            s = lane.stop_s - 1.0
            while s > 0:
                size = _vehicle_box(rng, cfg)
                s -= size[1] / 2
                _try_place(_lane_actor(lane, s, ActorClass.VEHICLE, size, 0.0, rng, cfg), placed, region)
                s -= size[1] / 2 + cfg.queue_gap_mean * rng.exponential()
                if rng.random() < 0.45:  # end of the queue
                    break
            s -= 20.0 + rng.exponential(cfg.vehicle_gap_mean)
            while s > 0:
                size = _vehicle_box(rng, cfg)
                _try_place(_lane_actor(lane, s, ActorClass.VEHICLE, size, flow * rng.uniform(0.5, 0.9), rng, cfg),
                           placed, region)
                s -= size[1] + 4.0 + rng.exponential(cfg.vehicle_gap_mean)
            continue
        s = rng.uniform(0.0, cfg.vehicle_gap_mean)
        while s < length:
            size = _vehicle_box(rng, cfg)
            s += size[1] / 2
            stopped = rng.random() < cfg.stopped_prob
            speed = 0.0 if stopped else float(min(limit, flow * rng.uniform(0.92, 1.05)))
            _try_place(_lane_actor(lane, s, ActorClass.VEHICLE, size, speed, rng, cfg), placed, region)
            s += size[1] / 2 + 4.0 + rng.exponential(cfg.vehicle_gap_mean)

    for cw in world.map.crosswalks:
        pts = np.array(cw)
        lo, hi = pts.min(0), pts.max(0)
        # the long side of the crosswalk is the walking direction
        axis = 0.0 if hi[0] - lo[0] > hi[1] - lo[1] else math.pi / 2
        for _ in range(rng.poisson(cfg.pedestrian_rate)):
            for _tries in range(20):
                x, y = rng.uniform(lo, hi)
                if point_in_polygon(x, y, cw):
                    break
            else:
                continue
            if rng.random() < cfg.pedestrian_moving_prob:
                mu, sd = cfg.pedestrian_log_speed
                speed = float(math.exp(rng.normal(mu, sd)))
                direction = wrap_angle(axis + (math.pi if rng.random() < 0.5 else 0.0) + rng.normal(0.0, 0.1))
            else:
                speed, direction = 0.0, 0.0
            _try_place(Actor(ActorClass.PEDESTRIAN, float(x), float(y), None, speed, direction), placed, region)

    return Scene(sdv, world.map, tuple(placed[1:]), region)


def random_map_spec(rng: np.random.Generator, seed: int) -> MapSpec:
    """The mixture of map styles used for synthetic datasets."""
    u = rng.random()
    lanes = 4 if rng.random() < 0.3 else 2
    if u < 0.35:
        return MapSpec("straight", lanes, seed)
    if u < 0.5:
        return MapSpec("straight", int(rng.choice([1, 2])), seed, one_way=True)
    if u < 0.75:
        return MapSpec("curved", lanes, seed)
    return MapSpec("intersection", 2, seed)


def oracle_dataset(n: int, seed: int = 0, cfg: OracleConfig = OracleConfig(),
                   specs: Sequence[MapSpec] | None = None) -> list[Scene]:
    """``n`` scenes, each on its own freshly generated map."""
    rng = np.random.default_rng(seed)
    scenes = []
    for i in range(n):
        spec = specs[i % len(specs)] if specs else random_map_spec(rng, int(rng.integers(2**31)))
        world = build_world(spec)
        scenes.append(sample_oracle_scene(world, int(rng.integers(2**31)), cfg))
    return scenes


def wrong_way_scene(seed: int, cfg: OracleConfig = OracleConfig()) -> Scene:
    """A one-way road scene in which one moving vehicle drives against the lane direction."""
    rng = np.random.default_rng(seed)
    for attempt in range(100):
        world = build_world(MapSpec("straight", int(rng.choice([1, 2])), int(rng.integers(2**31)), one_way=True))
        scene = sample_oracle_scene(world, int(rng.integers(2**31)), cfg)
        moving = [i for i, a in enumerate(scene.actors) if a.cls is ActorClass.VEHICLE and a.speed > 0]
        if moving:
            break
    else:
        raise RuntimeError("could not build a wrong-way scene")
    i = moving[int(rng.integers(len(moving)))]
    a = scene.actors[i]
    flipped = Actor(a.cls, a.x, a.y, OrientedBox(a.box.width, a.box.length, wrap_angle(a.box.heading + math.pi)),
                    a.speed, wrap_angle(a.direction + math.pi))
    actors = list(scene.actors)
    actors[i] = flipped
    return scene.with_actors(actors)


# --- probabilistic grammar baseline -------------------------------------------------------

@dataclass(frozen=True)
class GrammarPrior:
    max_actors_per_lane: tuple[int, int] = (0, 4)          # uniform integer range, inclusive
    clearance_rate: float = 0.1                            # 1/m
    lateral_noise: float = 0.5                             # m, uniform half-width
    size_ranges: dict = field(default_factory=lambda: {
        "vehicle": ((1.6, 2.6), (3.5, 9.0)), "bicyclist": ((0.5, 0.9), (1.4, 2.1))})  # (width, length) bounds
    heading_noise: float = 0.2                             # rad, uniform half-width
    speed_range: tuple[float, float] = (0.0, 20.0)

    def __post_init__(self):
        lo, hi = self.max_actors_per_lane
        if lo < 0 or hi < lo:
            raise ValueError("bad actor count range")
        if not self.clearance_rate > 0:
            raise ValueError("clearance rate must be positive")
        if self.lateral_noise < 0 or self.heading_noise < 0:
            raise ValueError("noise half-widths must be non-negative")
        if self.speed_range[1] < self.speed_range[0] or self.speed_range[0] < 0:
            raise ValueError("bad speed range")
        for (w0, w1), (l0, l1) in self.size_ranges.values():
            if not (0 < w0 <= w1 and 0 < l0 <= l1):
                raise ValueError("bad size range")


def sample_grammar_scene(hdmap: HDMap, sdv: SDVState, prior: GrammarPrior = GrammarPrior(), seed: int = 0,
                         region: float = 40.0) -> Scene:
    """Actors placed along each lane segment's centerline by a simple probabilistic grammar."""
    rng = np.random.default_rng(seed)
    actors = []
    for seg in hdmap.lane_segments:
        if len(seg.centerline) < 2:
            continue
        cl = np.array(seg.centerline)
        length = polyline_length(cl)
        count = int(rng.integers(prior.max_actors_per_lane[0], prior.max_actors_per_lane[1] + 1))
        cls = ActorClass.BICYCLIST if seg.lane_type is LaneType.BIKE else ActorClass.VEHICLE
        (w0, w1), (l0, l1) = prior.size_ranges[cls.label]
        s = 0.0
        for _ in range(count):
            s += rng.exponential(1.0 / prior.clearance_rate)
            if s > length:
                break
            p, tangent = point_at(cl, s)
            lat = rng.uniform(-prior.lateral_noise, prior.lateral_noise)
            x = float(p[0] - math.sin(tangent) * lat)
            y = float(p[1] + math.cos(tangent) * lat)
            heading = wrap_angle(seg.orientation + rng.uniform(-prior.heading_noise, prior.heading_noise))
            speed = float(min(rng.uniform(*prior.speed_range), seg.speed_limit))
            direction = wrap_angle(heading + rng.uniform(-prior.heading_noise, prior.heading_noise)) \
                if speed > 0 else 0.0
            box = OrientedBox(float(rng.uniform(w0, w1)), float(rng.uniform(l0, l1)), heading)
            if in_region(x, y, region):
                actors.append(Actor(cls, x, y, box, speed, direction))
    return Scene(sdv, hdmap, tuple(actors), region)


# --- procedural baseline ------------------------------------------------------------------

@dataclass(frozen=True)
class RouteSet:
    routes: tuple[tuple[int, ...], ...]

    def validate(self, hdmap: HDMap) -> None:
        for r in self.routes:
            for a, b in zip(r, r[1:]):
                if b not in hdmap.segment(a).successors:
                    raise ValueError(f"segments {a} -> {b} are not connected")


def _blocked(seg: LaneSegment) -> bool:
    return seg.traffic_light is TrafficLight.RED


def enumerate_routes(hdmap: HDMap, max_routes: int = 1000) -> RouteSet:
    """Maximal paths through the lane graph by depth-first search.

    Routes start at segments without a predecessor (or at any segment reachable
    only through a red light) and never enter a red-lighted segment.
    """
    preds: dict[int, list[int]] = {s.id: [] for s in hdmap.lane_segments}
    for s in hdmap.lane_segments:
        for t in s.successors:
            preds[t].append(s.id)
    by_id = {s.id: s for s in hdmap.lane_segments}
    starts = [s.id for s in hdmap.lane_segments if not _blocked(s)
              and all(_blocked(by_id[p]) for p in preds[s.id])]
    routes: list[tuple[int, ...]] = []
    for start in starts:
        stack = [(start,)]
        while stack and len(routes) < max_routes:
            path = stack.pop()
            nxt = [t for t in by_id[path[-1]].successors if not _blocked(by_id[t]) and t not in path]
            if not nxt:
                routes.append(path)
            for t in reversed(nxt):
                stack.append(path + (t,))
    return RouteSet(tuple(routes))


def _route_polyline(hdmap: HDMap, route: Sequence[int]) -> np.ndarray:
    pts = []
    for sid in route:
        cl = list(hdmap.segment(sid).centerline)
        if pts and cl and np.allclose(pts[-1], cl[0]):
            cl = cl[1:]
        pts += cl
    return np.array(pts, dtype=float)


class SizeKDE:
    """Per-class Gaussian kernel density over (width, length) with positive-only resampling."""

    def __init__(self, data: dict[ActorClass, np.ndarray], bandwidth: float | str | None = None):
        self.data = {c: np.asarray(v, dtype=float) for c, v in data.items()}
        self.bandwidth = bandwidth
        self._kde = {}
        for cls, pts in self.data.items():
            self._kde[cls] = self._fit(pts)

    def _fit(self, pts: np.ndarray):
        if len(pts) >= 3:
            try:
                return gaussian_kde(pts.T, bw_method=self.bandwidth if self.bandwidth is not None else "scott")
            except np.linalg.LinAlgError:
                pass
        return None  # too few or degenerate points: isotropic kernel

    def _fallback_scale(self) -> float:
        return float(self.bandwidth) if isinstance(self.bandwidth, (int, float)) else 0.1

    def sample(self, cls: ActorClass, rng: np.random.Generator) -> tuple[float, float]:
        pts = self.data.get(cls)
        if pts is None or len(pts) == 0:
            raise KeyError(f"no size data for {cls.label}")
        for _ in range(1000):
            kde = self._kde[cls]
            if kde is not None:
                w, l = kde.resample(1, seed=rng)[:, 0]
            else:
                w, l = pts[rng.integers(len(pts))] + rng.normal(0.0, self._fallback_scale(), 2)
            if w > 0 and l > 0:
                return float(w), float(l)
        raise RuntimeError("could not draw a positive size")


def fit_size_kde(corpus: Iterable[Scene], bandwidth: float | str | None = None) -> SizeKDE:
    data: dict[ActorClass, list] = {}
    for s in corpus:
        for a in s.actors:
            if a.box is not None:
                data.setdefault(a.cls, []).append((a.box.width, a.box.length))
    return SizeKDE({c: np.array(v) for c, v in data.items()}, bandwidth)


@dataclass(frozen=True)
class ProceduralParams:
    clearance_rate: float = 0.1     # 1/m, exponential spacing between bumpers
    time_gap_mean: float = 1.5      # s, exponential time gap to the leader
    leader_speed: tuple[float, float] = (0.5, 1.0)   # fraction of the speed limit


@dataclass
class PlacementRecord:
    route: tuple[int, ...]
    s: float
    gap: float | None
    time_gap: float | None
    leader_speed: float | None
    speed: float


def sample_procedural_scene(hdmap: HDMap, sdv: SDVState, sizes: SizeKDE, params: ProceduralParams = ProceduralParams(),
                            seed: int = 0, region: float = 40.0, trace: list | None = None) -> Scene:
    """Actors along lane-graph routes with exponential clearances and time gaps; never colliding."""
    rng = np.random.default_rng(seed)
    routes = enumerate_routes(hdmap).routes
    placed: list[Actor] = [sdv.actor]
    for route in routes:
        cl = _route_polyline(hdmap, route)
        if len(cl) < 2:
            continue
        length = polyline_length(cl)
        cls = ActorClass.BICYCLIST if hdmap.segment(route[0]).lane_type is LaneType.BIKE else ActorClass.VEHICLE
        if cls not in sizes.data:
            continue
        limit = min(hdmap.segment(r).speed_limit for r in route)
        s = length - rng.exponential(1.0 / params.clearance_rate)
        leader = None
        while s > 0:
            w, l = sizes.sample(cls, rng)
            if leader is None:
                centre = s - l / 2
                speed = float(limit * rng.uniform(*params.leader_speed))
                rec = PlacementRecord(tuple(route), centre, None, None, None, speed)
            else:
                gap = rng.exponential(1.0 / params.clearance_rate)
                centre = leader[0] - leader[1] / 2 - gap - l / 2
                tau = rng.exponential(params.time_gap_mean)
                speed = float(min(gap / tau if tau > 0 else math.inf, leader[2], limit))
                rec = PlacementRecord(tuple(route), centre, float(gap), float(tau), leader[2], speed)
            if centre - l / 2 < 0:
                break
            p, tangent = point_at(cl, centre)
            heading = wrap_angle(tangent)
            a = Actor(cls, float(p[0]), float(p[1]), OrientedBox(w, l, heading), speed,
                      heading if speed > 0 else 0.0)
            if _try_place(a, placed, region):
                if trace is not None:
                    trace.append(rec)
            leader = (centre, l, speed)
            s = centre - l / 2
    return Scene(sdv, hdmap, tuple(placed[1:]), region)


# --- dataset files --------------------------------------------------------------------------

def write_dataset(out_dir: str | os.PathLike, n: int, seed: int = 0, style: str | None = None,
                  cfg: OracleConfig = OracleConfig()) -> Path:
    """Write ``n`` oracle scenes and their maps plus ``manifest.jsonl``; returns the manifest path."""
    out = Path(out_dir)
    (out / "maps").mkdir(parents=True, exist_ok=True)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    lines = []
    for i in range(n):
        map_seed = int(rng.integers(2**31))
        spec = random_map_spec(rng, map_seed) if style is None else MapSpec(style, 2, map_seed)
        scene_seed = int(rng.integers(2**31))
        world = build_world(spec)
        scene = sample_oracle_scene(world, scene_seed, cfg)
        map_rel = f"maps/map_{i:05d}.json"
        scene_rel = f"scenes/scene_{i:05d}.json"
        save_map(out / map_rel, world.map)
        save_scene(out / scene_rel, scene, map_ref=f"../{map_rel}")
        lines.append(json.dumps({"scene_path": scene_rel, "map_path": map_rel, "seed": scene_seed,
                                 "map_spec": asdict(spec)}, sort_keys=True))
    manifest = out / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + ("\n" if lines else ""))
    return manifest
