"""Scene container and the scene CSV format.

A scene file holds one scene as CSV with header
``scene_id,t,agent_id,x,y,z,u_along,u_cross``; rows are sorted by time and
then agent id, coordinates in meters, wind in m/s. Every second of the
scene span has at least one row, and all rows of one second carry the
same wind.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

SCENE_COLUMNS = ("scene_id", "t", "agent_id", "x", "y", "z", "u_along", "u_cross")


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class TrackPoint:
    t: int
    agent_id: str
    x: float
    y: float
    z: float


@dataclass
class AgentTrack:
    """Contiguous 1 Hz track of one agent starting at second ``t0``."""

    agent_id: str
    t0: int
    xyz: np.ndarray  # (n, 3) meters

    @property
    def t1(self) -> int:
        return self.t0 + len(self.xyz) - 1

    def covers(self, start: int, stop: int) -> bool:
        return self.t0 <= start and stop - 1 <= self.t1

    def slice(self, start: int, stop: int) -> np.ndarray:
        return self.xyz[start - self.t0 : stop - self.t0]


@dataclass
class Scene:
    scene_id: int
    t0: int
    wind: np.ndarray  # (duration, 2) u_along, u_cross per second
    tracks: dict[str, AgentTrack] = field(default_factory=dict)
    day: str = ""

    @property
    def duration(self) -> int:
        return len(self.wind)

    @property
    def t1(self) -> int:
        return self.t0 + self.duration - 1

    def agent_ids(self) -> list[str]:
        return sorted(self.tracks)

    def points(self) -> Iterator[TrackPoint]:
        """All track points ordered by (t, agent_id)."""
        rows = []
        for aid, tr in self.tracks.items():
            for k, (x, y, z) in enumerate(tr.xyz):
                rows.append(TrackPoint(tr.t0 + k, aid, float(x), float(y), float(z)))
        rows.sort(key=lambda p: (p.t, p.agent_id))
        return iter(rows)

    def validate(self) -> None:
        if self.duration == 0:
            raise SceneError(f"scene {self.scene_id}: empty")
        if self.wind.shape != (self.duration, 2):
            raise SceneError(f"scene {self.scene_id}: wind shape {self.wind.shape}")
        occupied = np.zeros(self.duration, dtype=bool)
        for tr in self.tracks.values():
            if tr.t0 < self.t0 or tr.t1 > self.t1:
                raise SceneError(f"scene {self.scene_id}: agent {tr.agent_id} outside scene span")
            if not np.all(np.isfinite(tr.xyz)):
                raise SceneError(f"scene {self.scene_id}: agent {tr.agent_id} has non-finite points")
            occupied[tr.t0 - self.t0 : tr.t1 - self.t0 + 1] = True
        if not occupied.all():
            gap = int(np.argmin(occupied)) + self.t0
            raise SceneError(f"scene {self.scene_id}: no agent present at t={gap}")


def _fmt(v: float) -> str:
    return repr(float(v))


def scene_to_csv(scene: Scene) -> str:
    buf = io.StringIO()
    buf.write(",".join(SCENE_COLUMNS) + "\n")
    for p in scene.points():
        ua, uc = scene.wind[p.t - scene.t0]
        buf.write(
            f"{scene.scene_id},{p.t},{p.agent_id},{_fmt(p.x)},{_fmt(p.y)},{_fmt(p.z)},"
            f"{_fmt(ua)},{_fmt(uc)}\n"
        )
    return buf.getvalue()


def scene_from_csv(text: str, day: str = "") -> Scene:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != SCENE_COLUMNS:
        raise SceneError(f"bad scene header {header!r}")
    scene_ids = set()
    per_agent: dict[str, list[tuple[int, float, float, float]]] = {}
    wind_at: dict[int, tuple[float, float]] = {}
    for row in reader:
        if not row:
            continue
        sid, t, aid, x, y, z, ua, uc = row
        scene_ids.add(int(sid))
        t = int(t)
        per_agent.setdefault(aid, []).append((t, float(x), float(y), float(z)))
        wind_at.setdefault(t, (float(ua), float(uc)))
    if len(scene_ids) != 1:
        raise SceneError(f"expected one scene id per file, got {sorted(scene_ids)}")
    t0, t1 = min(wind_at), max(wind_at)
    missing = [t for t in range(t0, t1 + 1) if t not in wind_at]
    if missing:
        raise SceneError(f"no agent present at t={missing[0]}")
    wind = np.array([wind_at[t] for t in range(t0, t1 + 1)], dtype=float)
    tracks = {}
    for aid, rows in per_agent.items():
        rows.sort()
        ts = [r[0] for r in rows]
        if ts != list(range(ts[0], ts[0] + len(ts))):
            raise SceneError(f"agent {aid} track is not contiguous at 1 Hz")
        tracks[aid] = AgentTrack(aid, ts[0], np.array([r[1:] for r in rows], dtype=float))
    scene = Scene(scene_ids.pop(), t0, wind, dict(sorted(tracks.items())), day=day)
    scene.validate()
    return scene


def scene_filename(scene: Scene) -> str:
    return f"scene_{scene.scene_id:05d}.csv"


def write_scene(scene: Scene, directory: Path) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / scene_filename(scene)
    path.write_text(scene_to_csv(scene), encoding="utf-8")
    return path


def read_scene(path: Path) -> Scene:
    return scene_from_csv(Path(path).read_text(encoding="utf-8"), day=Path(path).parent.name)


def list_days(root: Path) -> list[str]:
    """Day partitions are the sub-directories of a dataset root holding scene files."""
    root = Path(root)
    return sorted(p.name for p in root.iterdir() if p.is_dir() and any(p.glob("scene_*.csv")))


def read_day(root: Path, day: str) -> list[Scene]:
    return [read_scene(p) for p in sorted((Path(root) / day).glob("scene_*.csv"))]
