import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scenegen.raster import (
    ACTOR_CHANNELS, ATG4D_CHANNELS, CROSSWALK_CH, DIR_COS_CH, DIR_SIN_CH, DRIVABLE_CH, HEAD_COS_CH, OCC_CH,
    ORIENT_COS_CH, ORIENT_SIN_CH, RESERVED_CH, SPEED_CH, RasterConfig, RasterImage, compose_input, polygon_mask,
    rasterize_actors, rasterize_map, rasterize_prefixes, write_pgm,
)
from scenegen.scene import (
    Actor, ActorClass, HDMap, LaneSegment, OrientedBox, Scene, SDVState, rotate_scene,
)
from scenegen.worldsim import oracle_dataset

CFG = RasterConfig()  # 80 m at 0.25 m
SMALL = RasterConfig(region_m=20.0, resolution_m=0.5)


def square(half, cx=0.0, cy=0.0):
    return ((cx - half, cy - half), (cx + half, cy - half), (cx + half, cy + half), (cx - half, cy + half))


def winding_inside(poly, x, y):
    """Independent point-in-polygon oracle: nonzero winding number."""
    wn = 0
    n = len(poly)
    for i in range(n):
        (x0, y0), (x1, y1) = poly[i], poly[(i + 1) % n]
        cross = (x1 - x0) * (y - y0) - (x - x0) * (y1 - y0)
        if y0 <= y < y1 and cross > 0:
            wn += 1
        elif y1 <= y < y0 and cross < 0:
            wn -= 1
    return wn != 0


def brute_force_count(poly, cfg):
    centres = -cfg.region_m + (np.arange(cfg.size) + 0.5) * cfg.resolution_m
    return sum(winding_inside(poly, x, y) for y in centres for x in centres)


def test_default_grid_is_320():
    assert CFG.shape == (320, 320)
    with pytest.raises(ValueError):
        RasterConfig(region_m=40.0, resolution_m=0.3)


def test_empty_map_is_zero():
    img = rasterize_map(HDMap(), CFG)
    assert img.data.shape == (ATG4D_CHANNELS, 320, 320)
    assert not img.data.any()


def test_ten_metre_square_fills_1600_pixels():
    img = rasterize_map(HDMap(drivable_area=(square(5.0),)), CFG)
    assert int(img.data[DRIVABLE_CH].sum()) == 1600
    assert brute_force_count(square(5.0), SMALL) == int(rasterize_map(HDMap(drivable_area=(square(5.0),)),
                                                                       SMALL).data[DRIVABLE_CH].sum())


@pytest.mark.parametrize("seed", range(4))
def test_polygon_fill_matches_winding_oracle(seed):
    rng = np.random.default_rng(seed)
    # random convex-ish star polygon, vertices in counter-clockwise order
    k = int(rng.integers(3, 9))
    ang = np.sort(rng.uniform(0, 2 * math.pi, k))
    rad = rng.uniform(3, 15, k)
    cx, cy = rng.uniform(-10, 10, 2)
    poly = tuple((cx + r * math.cos(a), cy + r * math.sin(a)) for a, r in zip(ang, rad))
    hit = polygon_mask(poly, SMALL)
    got = 0 if hit is None else int(hit[2].sum())
    assert got == brute_force_count(poly, SMALL)


def test_lane_orientation_biternion():
    seg = LaneSegment(0, square(3.0), math.pi / 2, 10.0)
    img = rasterize_map(HDMap(lane_segments=(seg,)), CFG).data
    filled = img[ORIENT_SIN_CH] != 0
    assert filled.sum() == 24 * 24
    assert np.allclose(img[ORIENT_SIN_CH][filled], 1.0)
    assert np.allclose(img[ORIENT_COS_CH][filled], 0.0, atol=1e-15)
    assert not img[RESERVED_CH].any()


def test_geometry_outside_region_is_clipped():
    img = rasterize_map(HDMap(crosswalks=(square(10.0, 100.0, 100.0), square(10.0, 45.0, 0.0))), CFG)
    # the second square overlaps [35, 55] x [-10, 10], i.e. 5 m x 20 m inside
    assert int(img.data[CROSSWALK_CH].sum()) == 20 * 80


def test_no_actors_only_sdv_channel():
    img = rasterize_actors(SDVState.default(), [], CFG).data
    assert img.shape == (ACTOR_CHANNELS, 320, 320)
    assert img[OCC_CH["sdv"]].sum() > 0
    for ch in (OCC_CH[ActorClass.VEHICLE], OCC_CH[ActorClass.PEDESTRIAN], OCC_CH[ActorClass.BICYCLIST], SPEED_CH):
        assert not img[ch].any()


def test_vehicle_footprint_and_motion_channels():
    v = Actor(ActorClass.VEHICLE, 10.0, 10.0, OrientedBox(2.0, 4.0, 0.0), 5.0, 0.0)
    img = rasterize_actors(SDVState.default(), [v], CFG).data
    occ = img[OCC_CH[ActorClass.VEHICLE]] == 1
    assert occ.sum() == 8 * 16
    assert np.all(img[SPEED_CH][occ] == 5.0)
    assert np.all(img[DIR_COS_CH][occ] == 1.0)
    assert not img[SPEED_CH][~occ & (img[OCC_CH["sdv"]] == 0)].any()


def test_sdv_footprint_is_axis_aligned_box():
    sdv = SDVState(Actor(ActorClass.VEHICLE, 0.0, 0.0, OrientedBox(2.0, 4.0, 0.0)))
    img = rasterize_actors(sdv, [], CFG).data
    assert img[OCC_CH["sdv"]].sum() == 128


def test_pedestrian_is_one_pixel():
    p = Actor(ActorClass.PEDESTRIAN, -3.1, 7.6, None, 1.2, 1.0)
    img = rasterize_actors(SDVState.default(), [p], CFG).data
    occ = img[OCC_CH[ActorClass.PEDESTRIAN]]
    assert occ.sum() == 1
    r, c = CFG.to_bin(p.x, p.y)
    assert occ[r, c] == 1
    assert img[HEAD_COS_CH, r, c] == 0
    assert img[DIR_SIN_CH, r, c] == pytest.approx(math.sin(1.0))


def test_later_actor_wins_on_overlap():
    a = Actor(ActorClass.VEHICLE, 10.0, 10.0, OrientedBox(2.0, 4.0, 0.0), 5.0, 0.0)
    b = Actor(ActorClass.VEHICLE, 10.0, 10.0, OrientedBox(2.0, 4.0, 0.0), 9.0, 0.0)
    img = rasterize_actors(SDVState.default(), [a, b], CFG).data
    assert img[SPEED_CH].max() == 9.0


def test_prefix_images_match_incremental_rasterization():
    s = oracle_dataset(1, seed=4)[0]
    pref = rasterize_prefixes(s.sdv, s.actors, SMALL, dtype=np.float64)
    assert pref.shape[0] == len(s.actors) + 1
    for i in range(len(s.actors) + 1):
        np.testing.assert_array_equal(pref[i], rasterize_actors(s.sdv, s.actors[:i], SMALL).data)


def test_compose_input():
    m = rasterize_map(HDMap(), SMALL)
    a = rasterize_actors(SDVState.default(), [], SMALL)
    x = compose_input(m, a)
    assert x.data.shape == (33, 80, 80)
    np.testing.assert_array_equal(x.data[:24], m.data)
    np.testing.assert_array_equal(x.data[24:], a.data)
    with pytest.raises(ValueError):
        compose_input(m, RasterImage(np.zeros((9, 40, 80))))


def test_argoverse_variant():
    cfg = RasterConfig(region_m=20.0, resolution_m=0.5, map_variant="argoverse")
    s = oracle_dataset(1, seed=2)[0]
    img = rasterize_map(s.map, cfg)
    assert img.channels == 9
    assert cfg.input_channels == 18


def test_rasterization_is_deterministic():
    s = oracle_dataset(1, seed=9)[0]
    a = rasterize_map(s.map, SMALL).data
    b = rasterize_map(s.map, SMALL).data
    assert a.tobytes() == b.tobytes()


def test_channel_value_ranges():
    for s in oracle_dataset(3, seed=11):
        m = rasterize_map(s.map, SMALL).data
        a = rasterize_actors(s.sdv, s.actors, SMALL).data
        for ch in list(range(20)) + [RESERVED_CH]:
            assert set(np.unique(m[ch])) <= {0.0, 1.0}
        assert np.all(np.abs(m[ORIENT_COS_CH:ORIENT_SIN_CH + 1]) <= 1)
        assert np.all(a[SPEED_CH] >= 0)
        occupied = a[:4].max(axis=0) > 0
        assert not a[4:, ~occupied].any()  # motion only where something is occupied


def _rot90_vehicle(x, y, heading):
    return Actor(ActorClass.VEHICLE, x, y, OrientedBox(1.5, 3.5, heading))


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.integers(-30, 29), st.integers(-30, 29), st.sampled_from([0, 1, 2, 3])),
                max_size=6))
def test_quarter_turn_equivariance(cells):
    # centres on half-metre offsets keep box edges off pixel centres after a quarter turn
    acts = [_rot90_vehicle(cx + 0.25, cy + 0.25, q * math.pi / 2) for cx, cy, q in cells]
    sdv = SDVState(Actor(ActorClass.VEHICLE, 0.0, 0.0, OrientedBox(2.0, 4.0, 0.0)))
    s = Scene(sdv, HDMap(), tuple(acts))
    r = rotate_scene(s, math.pi / 2)
    a = rasterize_actors(s.sdv, s.actors, SMALL).data
    b = rasterize_actors(r.sdv, r.actors, SMALL).data
    # rotating the world by +90 degrees sends pixel (row, col) to (col, W-1-row)
    for ch in range(4):
        np.testing.assert_array_equal(np.rot90(a[ch], k=-1), b[ch])
    hc = np.rot90(a[HEAD_COS_CH], -1)
    hs = np.rot90(a[HEAD_COS_CH + 1], -1)
    np.testing.assert_allclose(b[HEAD_COS_CH], -hs, atol=1e-12)
    np.testing.assert_allclose(b[HEAD_COS_CH + 1], hc, atol=1e-12)


def test_pgm_dump(tmp_path):
    img = rasterize_map(HDMap(drivable_area=(square(5.0),)), SMALL).data[DRIVABLE_CH]
    write_pgm(tmp_path / "d.pgm", img)
    blob = (tmp_path / "d.pgm").read_bytes()
    header = b"P5\n80 80\n255\n"
    assert blob.startswith(header)
    pix = np.frombuffer(blob[len(header):], dtype=np.uint8).reshape(80, 80)
    assert set(np.unique(pix)) == {0, 255}
    assert (pix == 255).sum() == img.sum()
