"""Cleaning, local-frame projection, cropping, 1 Hz resampling and scene segmentation."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .ingest import MetarReport, RawTrackRecord, nearest_report, wind_to_runway_frame
from .scenes import AgentTrack, Scene, TrackPoint

FT_TO_M = 0.3048

WGS84_A = 6378137.0
WGS84_F = 1.0 / 298.257223563
WGS84_E2 = WGS84_F * (2.0 - WGS84_F)

# one degree of latitude/longitude around the origin
SMALL_AREA_DEG = 1.0


@dataclass(frozen=True)
class FrameConfig:
    origin_lat: float
    origin_lon: float
    axis_azimuth_deg: float
    altitude_ceiling_ft: float = 6000.0
    radius_m: float = 5000.0
    gap_split_s: int = 60

    def __post_init__(self):
        if self.radius_m <= 0:
            raise ValueError("radius_m must be positive")
        if self.gap_split_s < 1:
            raise ValueError("gap_split_s must be >= 1")
        if not 0.0 <= self.axis_azimuth_deg < 360.0:
            raise ValueError("axis_azimuth_deg must be in [0, 360)")


class ProjectionError(ValueError):
    pass


# ----------------------------------------------------------------------
# cleaning


def _location_ok(rec: RawTrackRecord) -> bool:
    lat, lon, alt = rec.latitude, rec.longitude, rec.altitude_msl
    if not (math.isfinite(lat) and math.isfinite(lon) and math.isfinite(alt)):
        return False
    return -90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0


def clean(records: Iterable[RawTrackRecord]) -> tuple[list[RawTrackRecord], dict[str, int]]:
    """Drop corrupt locations, then duplicates of (id, lat, lon, alt); first occurrence wins."""
    kept: list[RawTrackRecord] = []
    seen: set[tuple] = set()
    stats = {"corrupt": 0, "duplicate": 0}
    for rec in records:
        if not _location_ok(rec):
            stats["corrupt"] += 1
            continue
        key = (rec.aircraft_id, rec.latitude, rec.longitude, rec.altitude_msl)
        if key in seen:
            stats["duplicate"] += 1
            continue
        seen.add(key)
        kept.append(rec)
    return kept, stats


# ----------------------------------------------------------------------
# geodetic <-> local frame


def _ecef(lat_deg, lon_deg, h=0.0):
    lat = np.radians(lat_deg)
    lon = np.radians(lon_deg)
    n = WGS84_A / np.sqrt(1.0 - WGS84_E2 * np.sin(lat) ** 2)
    return np.stack(
        [
            (n + h) * np.cos(lat) * np.cos(lon),
            (n + h) * np.cos(lat) * np.sin(lon),
            (n * (1.0 - WGS84_E2) + h) * np.sin(lat),
        ],
        axis=-1,
    )


def _enu_basis(lat_deg, lon_deg):
    lat = math.radians(lat_deg)
    lon = math.radians(lon_deg)
    east = np.array([-math.sin(lon), math.cos(lon), 0.0])
    north = np.array([-math.sin(lat) * math.cos(lon), -math.sin(lat) * math.sin(lon), math.cos(lat)])
    up = np.array([math.cos(lat) * math.cos(lon), math.cos(lat) * math.sin(lon), math.sin(lat)])
    return east, north, up


def _geodetic(ecef):
    x, y, z = ecef[..., 0], ecef[..., 1], ecef[..., 2]
    lon = np.arctan2(y, x)
    p = np.hypot(x, y)
    lat = np.arctan2(z, p * (1.0 - WGS84_E2))
    for _ in range(6):
        n = WGS84_A / np.sqrt(1.0 - WGS84_E2 * np.sin(lat) ** 2)
        h = p / np.cos(lat) - n
        lat = np.arctan2(z, p * (1.0 - WGS84_E2 * n / (n + h)))
    n = WGS84_A / np.sqrt(1.0 - WGS84_E2 * np.sin(lat) ** 2)
    h = p / np.cos(lat) - n
    return np.degrees(lat), np.degrees(lon), h


def project(lat, lon, alt_ft, cfg: FrameConfig) -> np.ndarray:
    """Vectorised tangent-plane projection; returns (..., 3) meters.

    x points along the runway axis, y 90 degrees clockwise of it (to the
    right, viewed from above), z is altitude MSL in meters.
    """
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    if np.any(np.abs(lat - cfg.origin_lat) > SMALL_AREA_DEG) or np.any(
        np.abs(lon - cfg.origin_lon) > SMALL_AREA_DEG
    ):
        raise ProjectionError(
            f"point farther than {SMALL_AREA_DEG} deg from origin "
            f"({cfg.origin_lat}, {cfg.origin_lon})"
        )
    d = _ecef(lat, lon) - _ecef(cfg.origin_lat, cfg.origin_lon)
    east, north, _ = _enu_basis(cfg.origin_lat, cfg.origin_lon)
    e = d @ east
    n = d @ north
    a = math.radians(cfg.axis_azimuth_deg)
    x = e * math.sin(a) + n * math.cos(a)
    y = e * math.cos(a) - n * math.sin(a)
    return np.stack([x, y, np.asarray(alt_ft, dtype=float) * FT_TO_M], axis=-1)


def to_local(record: RawTrackRecord, cfg: FrameConfig) -> tuple[float, float, float]:
    x, y, z = project(record.latitude, record.longitude, record.altitude_msl, cfg)
    return float(x), float(y), float(z)


def from_local(x, y, z, cfg: FrameConfig):
    """Inverse of :func:`project`: (lat_deg, lon_deg, alt_ft)."""
    a = math.radians(cfg.axis_azimuth_deg)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    e = x * math.sin(a) + y * math.cos(a)
    n = x * math.cos(a) - y * math.sin(a)
    east, north, up = _enu_basis(cfg.origin_lat, cfg.origin_lon)
    origin = _ecef(cfg.origin_lat, cfg.origin_lon)
    u = np.zeros_like(e)
    # the projected point lies on the ellipsoid; solve for its up offset
    for _ in range(5):
        ecef = origin + e[..., None] * east + n[..., None] * north + u[..., None] * up
        lat, lon, h = _geodetic(ecef)
        u = u - h
    return lat, lon, np.asarray(z, dtype=float) / FT_TO_M


def localize(records: Sequence[RawTrackRecord], cfg: FrameConfig) -> list[TrackPoint]:
    if not records:
        return []
    xyz = project(
        [r.latitude for r in records],
        [r.longitude for r in records],
        [r.altitude_msl for r in records],
        cfg,
    )
    return [
        TrackPoint(r.timestamp, r.aircraft_id, float(p[0]), float(p[1]), float(p[2]))
        for r, p in zip(records, xyz)
    ]


# ----------------------------------------------------------------------
# region of interest


def in_region(p: TrackPoint, cfg: FrameConfig) -> bool:
    return p.z <= cfg.altitude_ceiling_ft * FT_TO_M and math.hypot(p.x, p.y) <= cfg.radius_m


def crop_region(points: Iterable[TrackPoint], cfg: FrameConfig) -> list[TrackPoint]:
    """Drop points above the altitude ceiling or beyond the horizontal radius."""
    return [p for p in points if in_region(p, cfg)]


# ----------------------------------------------------------------------
# resampling


def _lerp(ts: np.ndarray, vs: np.ndarray, grid: np.ndarray) -> np.ndarray:
    i = np.searchsorted(ts, grid, side="right") - 1
    i = np.clip(i, 0, len(ts) - 2)
    t0, t1 = ts[i], ts[i + 1]
    w = (grid - t0) / (t1 - t0)
    out = vs[i] + w[:, None] * (vs[i + 1] - vs[i])
    exact = grid == t1
    out[exact] = vs[i + 1][exact]
    return out


def interpolate_1hz(points: Sequence[TrackPoint], gap_split_s: int = 60) -> list[list[TrackPoint]]:
    """Piecewise-linear resampling of one agent onto whole seconds.

    Observations more than ``gap_split_s`` apart are not bridged: each
    returned list is one contiguous 1 Hz segment. Repeated timestamps keep
    the first observation. No extrapolation beyond the observed span.
    """
    if not points:
        return []
    ordered = sorted(points, key=lambda p: p.t)
    uniq = [ordered[0]]
    for p in ordered[1:]:
        if p.t != uniq[-1].t:
            uniq.append(p)
    segments: list[list[TrackPoint]] = [[uniq[0]]]
    for prev, p in zip(uniq, uniq[1:]):
        if p.t - prev.t > gap_split_s:
            segments.append([p])
        else:
            segments[-1].append(p)
    out = []
    for seg in segments:
        aid = seg[0].agent_id
        if len(seg) == 1:
            out.append([seg[0]])
            continue
        ts = np.array([p.t for p in seg], dtype=float)
        vs = np.array([(p.x, p.y, p.z) for p in seg], dtype=float)
        grid = np.arange(seg[0].t, seg[-1].t + 1)
        vals = _lerp(ts, vs, grid.astype(float))
        out.append([TrackPoint(int(t), aid, *map(float, v)) for t, v in zip(grid, vals)])
    return out


def interpolate_agents(points: Iterable[TrackPoint], gap_split_s: int = 60) -> dict[str, AgentTrack]:
    """Resample every agent; split segments after the first get ``#k`` suffixes."""
    by_agent: dict[str, list[TrackPoint]] = defaultdict(list)
    for p in points:
        by_agent[p.agent_id].append(p)
    tracks: dict[str, AgentTrack] = {}
    for aid in sorted(by_agent):
        for k, seg in enumerate(interpolate_1hz(by_agent[aid], gap_split_s)):
            name = aid if k == 0 else f"{aid}#{k}"
            tracks[name] = AgentTrack(name, seg[0].t, np.array([(p.x, p.y, p.z) for p in seg]))
    return tracks


# ----------------------------------------------------------------------
# segmentation


def occupancy_runs(tracks: Iterable[AgentTrack]) -> list[tuple[int, int]]:
    """Maximal [start, end] second ranges covered by at least one track."""
    spans = sorted((tr.t0, tr.t1) for tr in tracks)
    runs: list[list[int]] = []
    for a, b in spans:
        if runs and a <= runs[-1][1] + 1:
            runs[-1][1] = max(runs[-1][1], b)
        else:
            runs.append([a, b])
    return [(a, b) for a, b in runs]


def segment_scenes(
    tracks: dict[str, AgentTrack],
    cfg: FrameConfig,
    wind_at=None,
    day: str = "",
) -> list[Scene]:
    """Split resampled tracks into scenes of continuous occupancy.

    A scene ends at the first second with no aircraft present. Because
    tracks themselves never bridge gaps longer than ``cfg.gap_split_s``,
    any empty stretch longer than that is always a boundary as well.
    ``wind_at(t0, t1)`` returns a (t1 - t0 + 1, 2) wind array; calm if None.
    """
    scenes = []
    for sid, (a, b) in enumerate(occupancy_runs(tracks.values())):
        members = {
            aid: tr for aid, tr in sorted(tracks.items()) if tr.t0 >= a and tr.t1 <= b
        }
        wind = np.zeros((b - a + 1, 2)) if wind_at is None else np.asarray(wind_at(a, b), float)
        scene = Scene(sid, a, wind, members, day=day)
        scene.validate()
        scenes.append(scene)
    return scenes


def wind_lookup(reports: Sequence[MetarReport], axis_azimuth_deg: float):
    """Build ``wind_at(t0, t1)`` from time-sorted METARs by nearest issue time."""
    if not reports:
        raise ValueError("no weather available")
    times = [r.issue_time for r in reports]
    cache: dict[int, tuple[float, float]] = {}

    def components(rep: MetarReport) -> tuple[float, float]:
        key = id(rep)
        if key not in cache:
            w = wind_to_runway_frame(rep, axis_azimuth_deg)
            cache[key] = (w.u_along, w.u_cross)
        return cache[key]

    def wind_at(t0: int, t1: int) -> np.ndarray:
        return np.array([components(nearest_report(reports, times, t)) for t in range(t0, t1 + 1)])

    return wind_at


def process_records(
    records: Sequence[RawTrackRecord],
    reports: Sequence[MetarReport],
    cfg: FrameConfig,
    day: str = "",
) -> tuple[list[Scene], dict[str, int]]:
    """Full chain for one day of raw records: clean, project, crop, resample, segment."""
    kept, stats = clean(records)
    near = [
        r
        for r in kept
        if abs(r.latitude - cfg.origin_lat) <= SMALL_AREA_DEG
        and abs(r.longitude - cfg.origin_lon) <= SMALL_AREA_DEG
    ]
    stats["far"] = len(kept) - len(near)
    points = localize(near, cfg)
    cropped = crop_region(points, cfg)
    stats["cropped"] = len(points) - len(cropped)
    tracks = interpolate_agents(cropped, cfg.gap_split_s)
    wind_at = wind_lookup(reports, cfg.axis_azimuth_deg)
    scenes = segment_scenes(tracks, cfg, wind_at, day=day)
    stats["scenes"] = len(scenes)
    return scenes, stats
