"""Synthetic left-hand traffic-pattern scenes.

Geometry is built in the runway frame of :mod:`trajair.geo` (+x along the
runway axis, +y to the right of it). The runway is centred on the origin.
"low" means departures roll toward +x, "high" toward -x. Circuits are
constructed for the low runway and rotated by 180 degrees for the high
one, which keeps every circuit turn a left turn.

Aircraft are kinematic: constant airspeed along a path of straight legs
joined by circular arcs of radius airspeed / turn_rate, sampled at 1 Hz.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .ingest import WindContext
from .scenes import AgentTrack, Scene, scene_filename, write_scene

INTENTS = ("full-circuit", "downwind-entry", "straight-out")
RUNWAYS = ("low", "high")
REGION_RADIUS_M = 4800.0  # margin inside the 5 km crop
LIGHT_WIND_MPS = 1.0


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class PatternSpec:
    runway_length_m: float = 1500.0
    pattern_altitude_m: float = 300.0
    # (crosswind leg = downwind offset from the runway, downwind leg length)
    leg_lengths_m: tuple[float, float] = (1000.0, 2800.0)
    airspeed_mps: float = 36.0
    turn_rate_dps: float = 9.0
    noise_sigma_m: float = 15.0
    runway_in_use: str = "auto"  # "low", "high", or "auto" (chosen by the wind)
    climb_rate_mps: float = 4.0
    glide_slope: float = 0.06
    departure_altitude_m: float = 600.0
    leg_jitter: float = 0.2
    max_agents: int = 3

    def __post_init__(self):
        object.__setattr__(self, "leg_lengths_m", tuple(float(v) for v in self.leg_lengths_m))
        numbers = [
            self.runway_length_m, self.pattern_altitude_m, *self.leg_lengths_m, self.airspeed_mps,
            self.turn_rate_dps, self.climb_rate_mps, self.glide_slope, self.departure_altitude_m,
        ]
        if any(not v > 0 for v in numbers):
            raise ValueError("pattern dimensions, speeds and rates must be positive")
        if self.noise_sigma_m < 0 or not 0 <= self.leg_jitter < 1:
            raise ValueError("noise_sigma_m must be >= 0 and leg_jitter in [0, 1)")
        if self.runway_in_use not in RUNWAYS + ("auto",):
            raise ValueError(f"runway_in_use must be one of low/high/auto, got {self.runway_in_use!r}")
        if self.max_agents < 1:
            raise ValueError("max_agents must be >= 1")

    @property
    def turn_radius_m(self) -> float:
        return self.airspeed_mps / math.radians(self.turn_rate_dps)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["leg_lengths_m"] = list(self.leg_lengths_m)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PatternSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown pattern spec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class AgentPlan:
    spawn_t: int
    intent: str
    crosswind_m: float
    downwind_m: float
    downwind_shift_m: float = 0.0
    entry_length_m: float = 3000.0
    airspeed_mps: float = 36.0

    def __post_init__(self):
        if self.intent not in INTENTS:
            raise ValueError(f"unknown intent {self.intent!r}")


@dataclass(frozen=True)
class SyntheticScenario:
    agents: tuple[AgentPlan, ...]
    wind: WindContext = WindContext(0.0, 0.0)
    runway: str | None = None  # None: decided from the wind at generation time

    def __post_init__(self):
        spawns = [a.spawn_t for a in self.agents]
        if not spawns:
            raise ValueError("scenario needs at least one agent")
        if any(b < a for a, b in zip(spawns, spawns[1:])):
            raise ValueError("spawn times must be non-decreasing")
        if self.runway is not None and self.runway not in RUNWAYS:
            raise ValueError(f"runway must be low or high, got {self.runway!r}")


# ----------------------------------------------------------------------
# paths


@dataclass
class _Segment:
    x: float
    y: float
    heading: float  # radians, counter-clockwise from +x in the (x, y) plane
    length: float
    curvature: float  # 1/m; negative turns toward -y (a left turn in this frame)

    def at(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.curvature == 0.0:
            return self.x + u * math.cos(self.heading), self.y + u * math.sin(self.heading)
        k = self.curvature
        h = self.heading + k * u
        return (
            self.x + (np.sin(h) - math.sin(self.heading)) / k,
            self.y - (np.cos(h) - math.cos(self.heading)) / k,
        )


class Path2D:
    """Planar path built from straight runs and constant-radius turns."""

    def __init__(self, x: float, y: float, heading_deg: float):
        self.segments: list[_Segment] = []
        self._x, self._y, self._h = x, y, math.radians(heading_deg)

    @property
    def length(self) -> float:
        return sum(s.length for s in self.segments)

    def _push(self, length: float, curvature: float) -> None:
        seg = _Segment(self._x, self._y, self._h, length, curvature)
        self.segments.append(seg)
        x, y = seg.at(np.array(length))
        self._x, self._y = float(x), float(y)
        self._h += curvature * length

    def straight(self, length: float) -> "Path2D":
        if length < 0:
            raise GeometryError(f"leg shorter than the turn radius allows ({length:.1f} m left)")
        if length > 0:
            self._push(length, 0.0)
        return self

    def turn(self, degrees: float, radius: float) -> "Path2D":
        """Positive degrees turn counter-clockwise in (x, y), i.e. to the right in the runway frame."""
        if degrees:
            sign = 1.0 if degrees > 0 else -1.0
            self._push(radius * math.radians(abs(degrees)), sign / radius)
        return self

    def sample(self, s: np.ndarray) -> np.ndarray:
        """(x, y) at arc lengths ``s`` (clipped to the path)."""
        s = np.clip(np.asarray(s, float), 0.0, self.length)
        out = np.empty((len(s), 2))
        bounds = np.cumsum([0.0] + [seg.length for seg in self.segments])
        idx = np.clip(np.searchsorted(bounds, s, side="right") - 1, 0, len(self.segments) - 1)
        for i, seg in enumerate(self.segments):
            sel = idx == i
            if sel.any():
                out[sel, 0], out[sel, 1] = seg.at(s[sel] - bounds[i])
        return out


def _corner_cut(radius: float, degrees: float) -> float:
    """Distance from a corner to the tangent point of a fillet turning ``degrees``."""
    return radius * math.tan(math.radians(abs(degrees)) / 2.0)


def agent_path(spec: PatternSpec, plan: AgentPlan) -> tuple[Path2D, bool, bool]:
    """Path for the low runway plus (starts_on_runway, ends_on_runway)."""
    r = plan.airspeed_mps / math.radians(spec.turn_rate_dps)
    half = spec.runway_length_m / 2.0
    threshold = -half
    touchdown = threshold + 150.0
    upwind_x = plan.downwind_shift_m + plan.downwind_m / 2.0
    base_x = plan.downwind_shift_m - plan.downwind_m / 2.0
    offset = plan.crosswind_m
    if base_x + r > touchdown - 50.0:
        raise GeometryError("base leg lies beyond the touchdown point; lengthen the downwind leg")
    if upwind_x - r < half:
        raise GeometryError("crosswind turn starts before the departure end; lengthen the downwind leg")

    if plan.intent == "straight-out":
        path = Path2D(threshold, 0.0, 0.0).straight(REGION_RADIUS_M + spec.runway_length_m)
        return path, True, False

    if plan.intent == "full-circuit":
        path = Path2D(threshold, 0.0, 0.0)
        path.straight(upwind_x - threshold - r).turn(-90, r)
        path.straight(offset - 2 * r).turn(-90, r)
        path.straight(upwind_x - base_x - 2 * r)
    else:
        # join downwind mid-leg on a 45 degree line from the outside
        join_x = plan.downwind_shift_m
        cut = _corner_cut(r, 45.0)
        d = plan.entry_length_m
        start_x = join_x + d / math.sqrt(2.0)
        start_y = -offset - d / math.sqrt(2.0)
        path = Path2D(start_x, start_y, 135.0)
        path.straight(d - cut).turn(45, r)
        path.straight(join_x - base_x - cut - r)
    path.turn(-90, r).straight(offset - 2 * r).turn(-90, r)
    path.straight(touchdown - base_x - r)
    return path, plan.intent == "full-circuit", True


def _altitude(spec: PatternSpec, s: np.ndarray, total: float, takeoff: bool, landing: bool, cruise: float):
    z = np.full(s.shape, cruise)
    if takeoff:
        z = np.minimum(z, s * (spec.climb_rate_mps / spec.airspeed_mps))
    if landing:
        z = np.minimum(z, (total - s) * spec.glide_slope)
    return z


def agent_xyz(spec: PatternSpec, plan: AgentPlan, runway: str) -> np.ndarray:
    """Noiseless 1 Hz positions (n, 3) inside the region, in the runway frame."""
    path, takeoff, landing = agent_path(spec, plan)
    total = path.length
    s = np.arange(0.0, total + 1e-9, plan.airspeed_mps)
    xy = path.sample(s)
    cruise = spec.departure_altitude_m if plan.intent == "straight-out" else spec.pattern_altitude_m
    z = _altitude(spec, s, total, takeoff, landing, cruise)
    if runway == "high":
        xy = -xy
    inside = np.hypot(xy[:, 0], xy[:, 1]) <= REGION_RADIUS_M
    if not inside.any():
        raise GeometryError("track never enters the region")
    # keep the single contiguous in-region stretch (paths cross the boundary at most twice)
    first = int(np.argmax(inside))
    last = len(inside) - int(np.argmax(inside[::-1]))
    keep = slice(first, last)
    if not inside[keep].all():
        raise GeometryError("track leaves and re-enters the region")
    return np.column_stack([xy[keep], z[keep]])


def choose_runway(spec: PatternSpec, wind: WindContext, rng: np.random.Generator) -> str:
    """Take off into the wind; light or variable winds pick a runway at random."""
    if spec.runway_in_use != "auto":
        return spec.runway_in_use
    if wind.variable_flag or abs(wind.u_along) < LIGHT_WIND_MPS:
        return RUNWAYS[int(rng.integers(2))]
    # u_along < 0: the air moves toward -x, so a departure toward +x has a headwind
    return "low" if wind.u_along < 0 else "high"


# ----------------------------------------------------------------------
# scenes


def generate_scene(spec: PatternSpec, scenario: SyntheticScenario, seed: int, scene_id: int = 0,
                   day: str = "") -> Scene:
    rng = np.random.default_rng(seed)
    runway = scenario.runway or choose_runway(spec, scenario.wind, rng)
    tracks = {}
    end = None
    for i, plan in enumerate(scenario.agents):
        xyz = agent_xyz(spec, plan, runway)
        if end is not None and plan.spawn_t > end + 1:
            raise GeometryError(f"agent {i} spawns after the scene has emptied")
        if spec.noise_sigma_m > 0:
            xyz = xyz + rng.normal(0.0, spec.noise_sigma_m, xyz.shape)
        aid = f"S{i:02d}"
        tracks[aid] = AgentTrack(aid, plan.spawn_t, xyz)
        end = max(end if end is not None else -1, plan.spawn_t + len(xyz) - 1)
    t0 = scenario.agents[0].spawn_t
    wind = np.tile([scenario.wind.u_along, scenario.wind.u_cross], (end - t0 + 1, 1))
    scene = Scene(scene_id, t0, wind, tracks, day)
    scene.validate()
    return scene


def random_scenario(spec: PatternSpec, rng: np.random.Generator) -> SyntheticScenario:
    """Random wind, runway-consistent mix of intents, and spawn times that keep the scene occupied."""
    speed = rng.uniform(0.0, 10.0)
    direction = rng.uniform(0.0, 2.0 * math.pi)
    wind = WindContext(speed * math.cos(direction), speed * math.sin(direction))
    n_agents = int(rng.integers(1, spec.max_agents + 1))
    j = spec.leg_jitter
    plans = []
    t = 0
    end = 0
    for k in range(n_agents):
        for _ in range(20):
            plan = AgentPlan(
                spawn_t=t,
                intent=INTENTS[int(rng.choice(3, p=[0.5, 0.3, 0.2]))],
                crosswind_m=spec.leg_lengths_m[0] * rng.uniform(1 - j, 1 + j),
                downwind_m=spec.leg_lengths_m[1] * rng.uniform(1 - j, 1 + j),
                downwind_shift_m=rng.uniform(-200.0, 200.0),
                entry_length_m=rng.uniform(1500.0, 4000.0),
                airspeed_mps=spec.airspeed_mps * rng.uniform(0.9, 1.1),
            )
            try:
                n = len(agent_xyz(spec, plan, "low"))
            except GeometryError:
                continue
            break
        else:
            raise GeometryError("could not draw a feasible agent plan; check the pattern spec")
        plans.append(plan)
        end = max(end, t + n - 1)
        t = min(end, t + int(rng.integers(10, max(11, min(150, end - t)))))
    return SyntheticScenario(tuple(plans), wind)


# ----------------------------------------------------------------------
# corpus


MANIFEST_NAME = "manifest.json"


@dataclass
class CorpusManifest:
    seed: int
    n_scenes: int
    scenes_per_day: int
    spec: dict
    scenes: list[dict] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"


def day_name(index: int) -> str:
    return f"day{index:03d}"


def generate_corpus(spec: PatternSpec, n_scenes: int, seed: int, out_dir: Path,
                    scenes_per_day: int = 50, provenance: dict | None = None) -> CorpusManifest:
    """Write ``n_scenes`` scenes into day directories plus a manifest of per-scene seeds."""
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    if scenes_per_day < 1:
        raise ValueError("scenes_per_day must be >= 1")
    seeds = np.random.SeedSequence(seed).generate_state(n_scenes, dtype=np.uint32)
    manifest = CorpusManifest(seed, n_scenes, scenes_per_day, spec.to_dict(), provenance=provenance or {})
    for i in range(n_scenes):
        manifest.scenes.append({"scene_id": i, "day": day_name(i // scenes_per_day), "seed": int(seeds[i])})
    return write_corpus(manifest, Path(out_dir))


def write_corpus(manifest: CorpusManifest, out_dir: Path) -> CorpusManifest:
    spec = PatternSpec.from_dict(manifest.spec)
    out_dir.mkdir(parents=True, exist_ok=True)
    for entry in manifest.scenes:
        rng = np.random.default_rng(entry["seed"])
        scenario = random_scenario(spec, rng)
        scene = generate_scene(spec, scenario, int(rng.integers(2**63)), entry["scene_id"], entry["day"])
        write_scene(scene, out_dir / entry["day"])
    (out_dir / MANIFEST_NAME).write_text(manifest.to_json())
    return manifest


def load_manifest(path: Path) -> CorpusManifest:
    return CorpusManifest(**json.loads(Path(path).read_text()))


def regenerate(manifest_path: Path, out_dir: Path) -> CorpusManifest:
    """Rebuild a corpus from its manifest alone."""
    return write_corpus(load_manifest(manifest_path), Path(out_dir))


def scene_path(root: Path, entry: dict) -> Path:
    return Path(root) / entry["day"] / scene_filename(entry["scene_id"])


def turn_signs(xy: np.ndarray, min_turn_rad: float = 1e-6) -> np.ndarray:
    """Sign of the heading change at each interior sample (0 on straight stretches)."""
    d = np.diff(xy, axis=0)
    cross = d[:-1, 0] * d[1:, 1] - d[:-1, 1] * d[1:, 0]
    dot = (d[:-1] * d[1:]).sum(axis=1)
    angle = np.arctan2(cross, dot)
    return np.where(np.abs(angle) > min_turn_rad, np.sign(angle), 0.0)


def headings_deg(xy: np.ndarray) -> np.ndarray:
    d = np.diff(xy, axis=0)
    return np.degrees(np.arctan2(d[:, 1], d[:, 0])) % 360.0


def load_spec(path: Path) -> PatternSpec:
    return PatternSpec.from_dict(json.loads(Path(path).read_text()))


def corpus_days(manifest: CorpusManifest) -> list[str]:
    return sorted({e["day"] for e in manifest.scenes})


def scenario_runway(spec: PatternSpec, scenario: SyntheticScenario, seed: int) -> str:
    """Runway ``generate_scene`` will use for this scenario and seed."""
    return scenario.runway or choose_runway(spec, scenario.wind, np.random.default_rng(seed))


__all__: Sequence[str] = (
    "AgentPlan", "CorpusManifest", "GeometryError", "PatternSpec", "SyntheticScenario",
    "agent_xyz", "choose_runway", "generate_corpus", "generate_scene", "random_scenario",
    "regenerate", "turn_signs", "headings_deg",
)
