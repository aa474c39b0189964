"""Fixed-horizon multi-agent windows cut from scenes."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .scenes import Scene, list_days, read_day


@dataclass(frozen=True)
class HorizonConfig:
    t_obs: int = 11
    t_pred: int = 120
    min_agents: int = 1
    stride: int = 1

    def __post_init__(self):
        for name in ("t_obs", "t_pred", "min_agents", "stride"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.t_obs < 2:
            raise ValueError("t_obs must be >= 2 (rollout needs two observed points)")

    @property
    def length(self) -> int:
        return self.t_obs + self.t_pred


@dataclass
class SequenceWindow:
    agent_ids: list[str]
    history: np.ndarray  # (A, t_obs, 3) meters
    future: np.ndarray  # (A, t_pred, 3) meters
    wind_hist: np.ndarray  # (A, t_obs, 2) m/s
    scene_id: int = 0
    start_t: int = 0
    day: str = ""

    @property
    def agents(self) -> int:
        return len(self.agent_ids)

    def permuted(self, order: Sequence[int]) -> "SequenceWindow":
        order = list(order)
        return SequenceWindow(
            [self.agent_ids[i] for i in order],
            self.history[order],
            self.future[order],
            self.wind_hist[order],
            self.scene_id,
            self.start_t,
            self.day,
        )


def make_windows(scene: Scene, cfg: HorizonConfig) -> list[SequenceWindow]:
    """Slide a t_obs + t_pred window over the scene at ``cfg.stride``.

    Only agents present for every step of a window are included; the
    window is kept when at least ``cfg.min_agents`` qualify. Agents are
    ordered by id.
    """
    span = cfg.length
    out = []
    ids = scene.agent_ids()
    for start in range(scene.t0, scene.t1 - span + 2, cfg.stride):
        stop = start + span
        agents = [a for a in ids if scene.tracks[a].covers(start, stop)]
        if len(agents) < cfg.min_agents:
            continue
        seq = np.stack([scene.tracks[a].slice(start, stop) for a in agents])
        wind = scene.wind[start - scene.t0 : start - scene.t0 + cfg.t_obs]
        out.append(
            SequenceWindow(
                agents,
                seq[:, : cfg.t_obs].copy(),
                seq[:, cfg.t_obs :].copy(),
                np.broadcast_to(wind, (len(agents), cfg.t_obs, 2)).copy(),
                scene.scene_id,
                start,
                scene.day,
            )
        )
    return out


def windows_from_scenes(scenes: Iterable[Scene], cfg: HorizonConfig) -> Iterator[SequenceWindow]:
    for scene in scenes:
        yield from make_windows(scene, cfg)


def split_days(
    dataset_root: Path, train_days: Sequence[str], test_days: Sequence[str]
) -> tuple[list[Scene], list[Scene]]:
    """Load scenes of disjoint day partitions for training and testing."""
    overlap = sorted(set(train_days) & set(test_days))
    if overlap:
        raise ValueError(f"days in both train and test splits: {overlap}")
    available = set(list_days(dataset_root))
    missing = sorted((set(train_days) | set(test_days)) - available)
    if missing:
        raise FileNotFoundError(f"day partitions not found under {dataset_root}: {missing}")
    train = [s for d in sorted(train_days) for s in read_day(dataset_root, d)]
    test = [s for d in sorted(test_days) for s in read_day(dataset_root, d)]
    return train, test


def default_day_split(dataset_root: Path, test_fraction: float = 0.2) -> tuple[list[str], list[str]]:
    """Last ``test_fraction`` of the (sorted) days are held out for testing."""
    days = list_days(dataset_root)
    if len(days) < 2:
        raise ValueError("need at least two day partitions to split")
    n_test = min(len(days) - 1, max(1, round(len(days) * test_fraction)))
    return days[:-n_test], days[-n_test:]


# ----------------------------------------------------------------------
# binary window cache
#
# layout: MAGIC | u32 version | u64 header_len | header JSON
#         | per window: history, future, wind_hist as little-endian float64

CACHE_MAGIC = b"TRAJWIN\0"
CACHE_VERSION = 1


def save_window_cache(path: Path, windows: Sequence[SequenceWindow], cfg: HorizonConfig) -> None:
    meta = {
        "horizon": [cfg.t_obs, cfg.t_pred],
        "windows": [
            {"agents": w.agent_ids, "scene_id": w.scene_id, "start_t": w.start_t, "day": w.day}
            for w in windows
        ],
    }
    header = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<IQ", CACHE_VERSION, len(header)))
        fh.write(header)
        for w in windows:
            for arr in (w.history, w.future, w.wind_hist):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_window_cache(path: Path, cfg: HorizonConfig) -> list[SequenceWindow]:
    blob = Path(path).read_bytes()
    if blob[: len(CACHE_MAGIC)] != CACHE_MAGIC:
        raise ValueError("not a window cache")
    version, header_len = struct.unpack_from("<IQ", blob, len(CACHE_MAGIC))
    if version != CACHE_VERSION:
        raise ValueError(f"unsupported window cache version {version}")
    offset = len(CACHE_MAGIC) + struct.calcsize("<IQ")
    meta = json.loads(blob[offset : offset + header_len])
    offset += header_len
    if meta["horizon"] != [cfg.t_obs, cfg.t_pred]:
        raise ValueError(f"cache horizon {meta['horizon']} does not match {cfg.t_obs}/{cfg.t_pred}")

    def read(shape):
        nonlocal offset
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, "<f8", count, offset).reshape(shape).astype(float)
        offset += 8 * count
        return arr

    out = []
    for entry in meta["windows"]:
        a = len(entry["agents"])
        out.append(
            SequenceWindow(
                entry["agents"],
                read((a, cfg.t_obs, 3)),
                read((a, cfg.t_pred, 3)),
                read((a, cfg.t_obs, 2)),
                entry["scene_id"],
                entry["start_t"],
                entry["day"],
            )
        )
    return out
