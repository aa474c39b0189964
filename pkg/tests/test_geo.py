import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import interp_oracle, meridional_radius, occupied_runs, prime_vertical_radius
from trajair.geo import (
    FrameConfig,
    ProjectionError,
    clean,
    crop_region,
    from_local,
    interpolate_1hz,
    interpolate_agents,
    occupancy_runs,
    process_records,
    segment_scenes,
    to_local,
)
from trajair.ingest import MetarReport, RawTrackRecord
from trajair.scenes import AgentTrack, Scene, SceneError, TrackPoint, scene_from_csv, scene_to_csv

ORIGIN = (40.78, -79.95)
CFG0 = FrameConfig(*ORIGIN, axis_azimuth_deg=0.0)
CFG90 = FrameConfig(*ORIGIN, axis_azimuth_deg=90.0)


def rec(t=1, ident="A", lat=ORIGIN[0], lon=ORIGIN[1], alt=1000.0):
    return RawTrackRecord(t, ident, lat, lon, alt)


# ---------------------------------------------------------------- clean


def test_clean_removes_out_of_range_latitude():
    kept, stats = clean([rec(lat=91.0), rec()])
    assert kept == [rec()]
    assert stats == {"corrupt": 1, "duplicate": 0}


def test_clean_deduplicates_identity_and_location():
    a = rec(t=1)
    b = rec(t=5)  # same id and location, later time
    kept, stats = clean([a, b])
    assert kept == [a] and stats["duplicate"] == 1


def test_clean_mixed_batch_against_filter_oracle():
    rng = random.Random(5)
    good = [rec(t=i, lat=40.78 + 0.001 * i) for i in range(7)]
    bad = [rec(lat=float("nan")), rec(lon=200.0), rec(alt=float("inf"))]
    batch = good + bad
    rng.shuffle(batch)
    kept, stats = clean(batch)

    def ok(r):
        return all(map(math.isfinite, (r.latitude, r.longitude, r.altitude_msl))) and abs(
            r.latitude
        ) <= 90 and abs(r.longitude) <= 180

    assert kept == [r for r in batch if ok(r)]
    assert len(kept) == 7 and stats["corrupt"] == 3


# ---------------------------------------------------------------- projection


def test_origin_maps_to_zero_with_altitude_in_meters():
    x, y, z = to_local(rec(alt=1250.0), CFG0)
    assert (x, y) == (0.0, 0.0)
    assert z == pytest.approx(381.0, abs=1e-9)


def test_north_offset_matches_meridional_radius():
    x, y, _ = to_local(rec(lat=ORIGIN[0] + 0.01), CFG0)
    # arc length along the meridian at the mid latitude
    expected = meridional_radius(ORIGIN[0] + 0.005) * math.radians(0.01)
    assert x == pytest.approx(expected, abs=0.05)
    assert abs(y) < 1e-6
    assert x == pytest.approx(1110.5, abs=0.1)


def test_east_offset_matches_prime_vertical_radius():
    x, y, _ = to_local(rec(lon=ORIGIN[1] + 0.01), CFG0)
    expected = prime_vertical_radius(ORIGIN[0]) * math.cos(math.radians(ORIGIN[0])) * math.radians(0.01)
    assert y == pytest.approx(expected, abs=0.05)
    # a parallel curves away from the tangent plane's east axis: d^2 tan(lat) / 2R
    assert x == pytest.approx(y * y * math.tan(math.radians(ORIGIN[0])) / (2 * 6.37e6), abs=0.005)


def test_axis_rotation_consistency():
    p = rec(lat=ORIGIN[0] + 0.01)
    x0, y0, _ = to_local(p, CFG0)
    x1, y1, _ = to_local(p, CFG90)
    # rotate (x0, y0) by -90 degrees
    assert x1 == pytest.approx(y0, abs=1e-9)
    assert y1 == pytest.approx(-x0, abs=1e-9)


def test_far_point_rejected():
    with pytest.raises(ProjectionError):
        to_local(rec(lat=ORIGIN[0] + 1.5), CFG0)


@settings(max_examples=100, deadline=None)
@given(
    st.floats(-5000, 5000),
    st.floats(-5000, 5000),
    st.floats(0, 1800),
    st.floats(0, 359.9),
)
def test_local_roundtrip_within_half_meter(x, y, z, axis):
    cfg = FrameConfig(*ORIGIN, axis_azimuth_deg=axis)
    lat, lon, alt_ft = from_local(x, y, z, cfg)
    back = to_local(rec(lat=float(lat), lon=float(lon), alt=float(alt_ft)), cfg)
    assert math.dist(back, (x, y, z)) < 0.5


# ---------------------------------------------------------------- crop


def pt(t=0, a="A", x=0.0, y=0.0, z=0.0):
    return TrackPoint(t, a, x, y, z)


def test_crop_examples():
    high_near = pt(x=1000.0, z=6500 * 0.3048)
    low_inside = pt(x=4900.0, z=3000 * 0.3048)
    assert crop_region([high_near, low_inside], CFG0) == [low_inside]


points_strategy = st.lists(
    st.builds(
        pt,
        x=st.floats(-8000, 8000),
        y=st.floats(-8000, 8000),
        z=st.floats(0, 3000),
    ),
    max_size=50,
)


@settings(max_examples=100)
@given(points_strategy)
def test_crop_matches_predicate_subset_and_idempotent(points):
    out = crop_region(points, CFG0)
    brute = [p for p in points if not (p.z > 6000 * 0.3048 or math.hypot(p.x, p.y) > 5000.0)]
    assert out == brute
    assert crop_region(out, CFG0) == out


# ---------------------------------------------------------------- interpolation


def test_linear_midpoint():
    (seg,) = interpolate_1hz([pt(0, x=0.0), pt(2, x=2.0)])
    assert [(p.t, p.x) for p in seg] == [(0, 0.0), (1, 1.0), (2, 2.0)]


def test_on_grid_points_unchanged():
    pts = [pt(t, x=0.1 * t * t, y=-3.3 * t, z=7.7) for t in range(10)]
    (seg,) = interpolate_1hz(pts)
    assert seg == pts


def test_single_point_passthrough():
    assert interpolate_1hz([pt(5, x=1.0)]) == [[pt(5, x=1.0)]]


def test_gap_splits_track():
    segs = interpolate_1hz([pt(0), pt(10), pt(100), pt(102)], gap_split_s=60)
    assert [[p.t for p in s] for s in segs] == [list(range(0, 11)), [100, 101, 102]]
    tracks = interpolate_agents([pt(0), pt(10), pt(100), pt(102)], 60)
    assert sorted(tracks) == ["A", "A#1"]


@settings(max_examples=100)
@given(st.lists(st.integers(0, 300), min_size=2, max_size=20, unique=True), st.integers(0, 2**32 - 1))
def test_interpolation_matches_oracle(times, seed):
    rng = random.Random(seed)
    times = sorted(times)
    pts = [pt(t, x=rng.uniform(-1e3, 1e3), y=rng.uniform(-1e3, 1e3), z=rng.uniform(0, 1e3)) for t in times]
    segs = interpolate_1hz(pts, gap_split_s=10_000)
    assert len(segs) == 1
    ts = [p.t for p in pts]
    for p in segs[0]:
        for axis in ("x", "y", "z"):
            want = interp_oracle(ts, [getattr(q, axis) for q in pts], p.t) if p.t not in ts else getattr(
                pts[ts.index(p.t)], axis
            )
            assert getattr(p, axis) == want


def test_affine_input_is_reproduced_exactly():
    pts = [pt(t, x=2.0 * t - 8.0, y=0.5 * t, z=300.0) for t in (0, 4, 8, 16, 24)]
    (seg,) = interpolate_1hz(pts)
    for p in seg:
        assert (p.x, p.y, p.z) == (2.0 * p.t - 8.0, 0.5 * p.t, 300.0)


# ---------------------------------------------------------------- segmentation


def track(aid, t0, n):
    return AgentTrack(aid, t0, np.zeros((n, 3)) + [t0, 0, 500])


def test_one_continuous_agent_one_scene():
    scenes = segment_scenes({"A": track("A", 0, 200)}, CFG0)
    assert len(scenes) == 1 and scenes[0].duration == 200


def test_ten_minute_gap_two_scenes():
    scenes = segment_scenes({"A": track("A", 0, 100), "B": track("B", 700, 100)}, CFG0)
    assert [s.scene_id for s in scenes] == [0, 1]
    assert [(s.t0, s.t1) for s in scenes] == [(0, 99), (700, 799)]


@settings(max_examples=100)
@given(st.lists(st.tuples(st.integers(0, 2000), st.integers(1, 300)), min_size=1, max_size=12))
def test_segmentation_matches_occupancy_scan(spans):
    tracks = {f"a{i}": track(f"a{i}", t0, n) for i, (t0, n) in enumerate(spans)}
    occupied = set()
    for t0, n in spans:
        occupied.update(range(t0, t0 + n))
    scenes = segment_scenes(tracks, CFG0)
    assert [(s.t0, s.t1) for s in scenes] == occupied_runs(occupied)
    assert [s.scene_id for s in scenes] == list(range(len(scenes)))
    assert sum(len(s.tracks) for s in scenes) == len(tracks)
    for s in scenes:
        s.validate()


def test_occupancy_runs_adjacent_spans_merge():
    assert occupancy_runs([track("a", 0, 5), track("b", 5, 5)]) == [(0, 9)]


# ---------------------------------------------------------------- scene files


def test_scene_csv_roundtrip_and_validation():
    wind = np.array([[1.5, -0.25]] * 6)
    scene = Scene(3, 100, wind, {"A": track("A", 100, 6), "B": track("B", 102, 2)})
    text = scene_to_csv(scene)
    back = scene_from_csv(text)
    assert scene_to_csv(back) == text
    assert back.scene_id == 3 and back.t0 == 100 and sorted(back.tracks) == ["A", "B"]
    with pytest.raises(SceneError):
        Scene(0, 0, np.zeros((10, 2)), {"A": track("A", 0, 3)}).validate()


def test_process_records_end_to_end():
    cfg = FrameConfig(*ORIGIN, axis_azimuth_deg=80.0)
    base = 1_600_000_000
    recs = []
    for k in range(0, 120, 3):
        recs.append(RawTrackRecord(base + k, "AC1", ORIGIN[0] + 1e-4 * k, ORIGIN[1], 2000.0))
    recs.append(RawTrackRecord(base + 1, "AC2", 95.0, 0.0, 1.0))  # corrupt
    recs.append(recs[0])  # duplicate
    recs.append(RawTrackRecord(base + 2, "AC3", ORIGIN[0], ORIGIN[1], 9000.0))  # too high
    reports = [
        MetarReport("KBTP", base - 100, 260, 10, None, ""),
        MetarReport("KBTP", base + 100, "CALM", 0, None, ""),
    ]
    scenes, stats = process_records(recs, reports, cfg)
    assert stats["corrupt"] == 1 and stats["duplicate"] == 1 and stats["cropped"] == 1
    assert len(scenes) == 1
    (scene,) = scenes
    assert scene.duration == 118 and list(scene.tracks) == ["AC1"]
    assert np.all(scene.wind[-10:] == 0.0)
    assert np.linalg.norm(scene.wind[0]) == pytest.approx(10 * 1852 / 3600)
