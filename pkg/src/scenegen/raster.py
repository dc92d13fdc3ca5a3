"""Bird's-eye-view rasterization of HD maps and actors.

Image layout is ``(C, H, W)`` with row index growing with ``y`` and column
index growing with ``x``; pixel ``(r, c)`` covers
``[-R + c*res, -R + (c+1)*res) x [-R + r*res, -R + (r+1)*res)``.

ATG4D-style map channels (24)::

     0- 4  lane polygons: straight, right, left, bus, bike
     5- 7  centerlines/dividers: allowed, forbidden, maybe allowed to cross
     8-10  lane segments: straight, right, left
    11-12  drivable area, road (union of lane segment polygons)
       13  crosswalks
    14-19  traffic light: green, yellow, red, flashing yellow, flashing red, unknown
       20  speed limit (m/s) over the lane segment
    21-22  lane orientation (cos, sin) over the lane segment
       23  reserved, always zero

Argoverse-style map channels (9)::

        0  lane polygons
     1- 5  centerlines: all, left turn, right turn, intersection, traffic controlled
     6- 7  lane orientation (cos, sin)
        8  drivable area

Actor channels (9)::

     0- 3  occupancy: SDV, vehicles, pedestrians, bicyclists
        4  speed
     5- 6  velocity direction (cos, sin); zero where the actor is static
     7- 8  heading (cos, sin); zero for pedestrians
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .scene import Actor, ActorClass, HDMap, LaneType, DividerType, SDVState, TrafficLight, TurnType

ATG4D_CHANNELS = 24
ARGOVERSE_CHANNELS = 9
ACTOR_CHANNELS = 9

LANE_POLY_CH = {LaneType.STRAIGHT: 0, LaneType.RIGHT: 1, LaneType.LEFT: 2, LaneType.BUS: 3, LaneType.BIKE: 4}
DIVIDER_CH = {DividerType.ALLOWED: 5, DividerType.FORBIDDEN: 6, DividerType.MAYBE: 7}
SEGMENT_CH = {LaneType.STRAIGHT: 8, LaneType.RIGHT: 9, LaneType.LEFT: 10}
DRIVABLE_CH, ROAD_CH, CROSSWALK_CH = 11, 12, 13
LIGHT_CH = {TrafficLight.GREEN: 14, TrafficLight.YELLOW: 15, TrafficLight.RED: 16,
            TrafficLight.FLASH_YELLOW: 17, TrafficLight.FLASH_RED: 18, TrafficLight.UNKNOWN: 19}
SPEED_LIMIT_CH, ORIENT_COS_CH, ORIENT_SIN_CH, RESERVED_CH = 20, 21, 22, 23

OCC_CH = {"sdv": 0, ActorClass.VEHICLE: 1, ActorClass.PEDESTRIAN: 2, ActorClass.BICYCLIST: 3}
SPEED_CH, DIR_COS_CH, DIR_SIN_CH, HEAD_COS_CH, HEAD_SIN_CH = 4, 5, 6, 7, 8


@dataclass(frozen=True)
class RasterConfig:
    region_m: float = 40.0
    resolution_m: float = 0.25
    map_variant: str = "atg4d"

    def __post_init__(self):
        n = 2.0 * self.region_m / self.resolution_m
        if self.resolution_m <= 0 or abs(n - round(n)) > 1e-9 or round(n) < 1:
            raise ValueError("2 * region_m must be an exact multiple of resolution_m")
        if self.map_variant not in ("atg4d", "argoverse"):
            raise ValueError(f"unknown map variant {self.map_variant!r}")

    @property
    def size(self) -> int:
        return int(round(2.0 * self.region_m / self.resolution_m))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.size, self.size)

    @property
    def map_channels(self) -> int:
        return ATG4D_CHANNELS if self.map_variant == "atg4d" else ARGOVERSE_CHANNELS

    @property
    def input_channels(self) -> int:
        return self.map_channels + ACTOR_CHANNELS

    def to_bin(self, x: float, y: float) -> tuple[int, int]:
        """(row, col) of the half-open bin containing ``(x, y)``."""
        col = math.floor((x + self.region_m) / self.resolution_m)
        row = math.floor((y + self.region_m) / self.resolution_m)
        return row, col

    def bin_lower(self, row: int, col: int) -> tuple[float, float]:
        """Lower-left corner ``(x, y)`` of a bin."""
        return (-self.region_m + col * self.resolution_m, -self.region_m + row * self.resolution_m)

    def centers(self) -> np.ndarray:
        return -self.region_m + (np.arange(self.size) + 0.5) * self.resolution_m


@dataclass(frozen=True)
class RasterImage:
    data: np.ndarray  # (C, H, W)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


# --- primitive fills ---------------------------------------------------------

def polygon_mask(poly, cfg: RasterConfig) -> tuple[slice, slice, np.ndarray] | None:
    """Pixels whose centres fall inside ``poly`` (even-odd rule), within its bounding box.

    Returns ``(row_slice, col_slice, mask)`` or ``None`` when nothing is inside the grid.
    """
    pts = np.asarray(poly, dtype=np.float64)
    n, res, R = cfg.size, cfg.resolution_m, cfg.region_m
    lo = np.floor((pts.min(axis=0) + R) / res - 0.5).astype(int)
    hi = np.ceil((pts.max(axis=0) + R) / res - 0.5).astype(int)
    c0, r0 = max(lo[0], 0), max(lo[1], 0)
    c1, r1 = min(hi[0], n - 1), min(hi[1], n - 1)
    if c0 > c1 or r0 > r1:
        return None
    xs = -R + (np.arange(c0, c1 + 1) + 0.5) * res
    ys = -R + (np.arange(r0, r1 + 1) + 0.5) * res
    px = xs[None, :]
    py = ys[:, None]
    inside = np.zeros((len(ys), len(xs)), dtype=bool)
    x0, y0 = pts[:, 0], pts[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    for ax, ay, bx, by in zip(x0, y0, x1, y1):
        if ay == by:
            continue
        straddles = (ay > py) != (by > py)
        xcross = ax + (py - ay) * (bx - ax) / (by - ay)
        inside ^= straddles & (px < xcross)
    if not inside.any():
        return None
    return slice(r0, r1 + 1), slice(c0, c1 + 1), inside


def polyline_pixels(points, cfg: RasterConfig) -> tuple[np.ndarray, np.ndarray]:
    """Rows/cols touched by a 1-pixel-wide polyline (dense sampling along each edge)."""
    pts = np.asarray(points, dtype=np.float64)
    step = cfg.resolution_m / 4.0
    samples = [pts[-1:]]
    for a, b in zip(pts[:-1], pts[1:]):
        k = max(int(math.ceil(np.linalg.norm(b - a) / step)), 1)
        t = np.arange(k)[:, None] / k
        samples.append(a + t * (b - a))
    s = np.concatenate(samples)
    cols = np.floor((s[:, 0] + cfg.region_m) / cfg.resolution_m).astype(int)
    rows = np.floor((s[:, 1] + cfg.region_m) / cfg.resolution_m).astype(int)
    ok = (rows >= 0) & (rows < cfg.size) & (cols >= 0) & (cols < cfg.size)
    return rows[ok], cols[ok]


def _fill(img: np.ndarray, channel: int, poly, cfg: RasterConfig, value: float = 1.0) -> None:
    hit = polygon_mask(poly, cfg)
    if hit is not None:
        rs, cs, m = hit
        img[channel, rs, cs][m] = value


def _line(img: np.ndarray, channel: int, points, cfg: RasterConfig) -> None:
    r, c = polyline_pixels(points, cfg)
    img[channel, r, c] = 1.0


# --- map ---------------------------------------------------------------------

def rasterize_map(m: HDMap, cfg: RasterConfig, dtype=np.float64) -> RasterImage:
    if cfg.map_variant == "argoverse":
        return RasterImage(_rasterize_map_argoverse(m, cfg, dtype))
    img = np.zeros((ATG4D_CHANNELS, cfg.size, cfg.size), dtype=dtype)
    for lp in m.lane_polygons:
        _fill(img, LANE_POLY_CH[lp.lane_type], lp.polygon, cfg)
    for cl in m.centerlines:
        _line(img, DIVIDER_CH[cl.divider], cl.points, cfg)
    for poly in m.drivable_area:
        _fill(img, DRIVABLE_CH, poly, cfg)
    for poly in m.crosswalks:
        _fill(img, CROSSWALK_CH, poly, cfg)
    for seg in m.lane_segments:
        hit = polygon_mask(seg.polygon, cfg)
        if hit is None:
            continue
        rs, cs, mask = hit
        if seg.lane_type in SEGMENT_CH:
            img[SEGMENT_CH[seg.lane_type], rs, cs][mask] = 1.0
        img[ROAD_CH, rs, cs][mask] = 1.0
        for ch in LIGHT_CH.values():
            img[ch, rs, cs][mask] = 0.0
        img[LIGHT_CH[seg.traffic_light], rs, cs][mask] = 1.0
        img[SPEED_LIMIT_CH, rs, cs][mask] = seg.speed_limit
        img[ORIENT_COS_CH, rs, cs][mask] = math.cos(seg.orientation)
        img[ORIENT_SIN_CH, rs, cs][mask] = math.sin(seg.orientation)
    return RasterImage(img)


def _rasterize_map_argoverse(m: HDMap, cfg: RasterConfig, dtype) -> np.ndarray:
    img = np.zeros((ARGOVERSE_CHANNELS, cfg.size, cfg.size), dtype=dtype)
    for lp in m.lane_polygons:
        _fill(img, 0, lp.polygon, cfg)
    for cl in m.centerlines:
        _line(img, 1, cl.points, cfg)
        if cl.turn is TurnType.LEFT:
            _line(img, 2, cl.points, cfg)
        if cl.turn is TurnType.RIGHT:
            _line(img, 3, cl.points, cfg)
        if cl.intersection:
            _line(img, 4, cl.points, cfg)
        if cl.controlled:
            _line(img, 5, cl.points, cfg)
    for seg in m.lane_segments:
        hit = polygon_mask(seg.polygon, cfg)
        if hit is None:
            continue
        rs, cs, mask = hit
        img[0, rs, cs][mask] = 1.0
        img[6, rs, cs][mask] = math.cos(seg.orientation)
        img[7, rs, cs][mask] = math.sin(seg.orientation)
    for poly in m.drivable_area:
        _fill(img, 8, poly, cfg)
    return img


# --- actors ------------------------------------------------------------------

def actor_footprint(a: Actor, cfg: RasterConfig) -> tuple[np.ndarray, np.ndarray]:
    """Rows/cols covered by an actor.

    Pedestrians and boxes too small to contain any pixel centre occupy the
    single pixel containing their position.
    """
    if a.box is not None:
        hit = polygon_mask(a.corners(), cfg)
        if hit is not None:
            rs, cs, m = hit
            rr, cc = np.nonzero(m)
            return rr + rs.start, cc + cs.start
    r, c = cfg.to_bin(a.x, a.y)
    if 0 <= r < cfg.size and 0 <= c < cfg.size:
        return np.array([r]), np.array([c])
    return np.zeros(0, dtype=int), np.zeros(0, dtype=int)


def paint_actor(img: np.ndarray, a: Actor, cfg: RasterConfig, is_sdv: bool = False) -> None:
    """Stamp one actor into a (9, H, W) array in place; later stamps win on overlap."""
    rr, cc = actor_footprint(a, cfg)
    if rr.size == 0:
        return
    img[OCC_CH["sdv" if is_sdv else a.cls], rr, cc] = 1.0
    img[SPEED_CH, rr, cc] = a.speed
    moving = a.speed > 0
    img[DIR_COS_CH, rr, cc] = math.cos(a.direction) if moving else 0.0
    img[DIR_SIN_CH, rr, cc] = math.sin(a.direction) if moving else 0.0
    if a.box is not None:
        img[HEAD_COS_CH, rr, cc] = math.cos(a.box.heading)
        img[HEAD_SIN_CH, rr, cc] = math.sin(a.box.heading)
    else:
        img[HEAD_COS_CH, rr, cc] = 0.0
        img[HEAD_SIN_CH, rr, cc] = 0.0


def rasterize_actors(sdv: SDVState, actors: Sequence[Actor], cfg: RasterConfig,
                     dtype=np.float64) -> RasterImage:
    img = np.zeros((ACTOR_CHANNELS, cfg.size, cfg.size), dtype=dtype)
    paint_actor(img, sdv.actor, cfg, is_sdv=True)
    for a in actors:
        paint_actor(img, a, cfg)
    return RasterImage(img)


def rasterize_prefixes(sdv: SDVState, actors: Sequence[Actor], cfg: RasterConfig,
                       steps: int | None = None, dtype=np.float32) -> np.ndarray:
    """Actor images for every generation step: entry ``i`` shows the SDV plus ``actors[:i]``.

    Returns an array of shape ``(steps, 9, H, W)``; ``steps`` defaults to ``len(actors) + 1``.
    """
    steps = len(actors) + 1 if steps is None else steps
    out = np.zeros((steps, ACTOR_CHANNELS, cfg.size, cfg.size), dtype=dtype)
    cur = np.zeros((ACTOR_CHANNELS, cfg.size, cfg.size), dtype=dtype)
    paint_actor(cur, sdv.actor, cfg, is_sdv=True)
    for i in range(steps):
        out[i] = cur
        if i < len(actors):
            paint_actor(cur, actors[i], cfg)
    return out


def compose_input(map_img: RasterImage, actor_img: RasterImage) -> RasterImage:
    if map_img.data.shape[1:] != actor_img.data.shape[1:]:
        raise ValueError(f"spatial shapes differ: {map_img.data.shape[1:]} vs {actor_img.data.shape[1:]}")
    return RasterImage(np.concatenate([map_img.data, actor_img.data], axis=0))


def write_pgm(path, channel: np.ndarray) -> None:
    """Binary PGM (P5, maxval 255), min-max scaled, rows written in array order."""
    a = np.asarray(channel, dtype=np.float64)
    lo, hi = float(a.min()), float(a.max())
    scaled = np.zeros_like(a) if hi <= lo else (a - lo) / (hi - lo)
    pix = np.round(scaled * 255).astype(np.uint8)
    h, w = pix.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + pix.tobytes())
