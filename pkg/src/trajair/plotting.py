"""Top-down static renderings of scenes and prediction sets."""

from __future__ import annotations

from collections import Counter
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .scenes import Scene  # noqa: E402

COLORS = {"observation": "tab:blue", "sample": "tab:green", "best": "black", "truth": "tab:red"}
FIGSIZE = (6.0, 6.0)
DPI = 100


def _new_axes():
    fig, ax = plt.subplots(figsize=FIGSIZE, dpi=DPI)
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_xlabel("along runway axis [km]")
    ax.set_ylabel("right of runway axis [km]")
    ax.grid(True, linewidth=0.3)
    return fig, ax


def _line(ax, xyz, role, counts, **kw):
    xyz = np.asarray(xyz, float)
    ax.plot(xyz[:, 0] / 1000.0, xyz[:, 1] / 1000.0, color=COLORS[role], gid=role, **kw)
    counts[role] += 1


def _save(fig, out: Path) -> None:
    fig.savefig(out, format="png", metadata={"Software": None})
    plt.close(fig)


def plot_scene(scene: Scene, out: Path) -> dict[str, int]:
    """One observation-coloured polyline per agent. Returns polyline counts by role."""
    if not scene.tracks:
        raise ValueError("scene has no tracks to plot")
    fig, ax = _new_axes()
    counts: Counter = Counter()
    for aid in scene.agent_ids():
        _line(ax, scene.tracks[aid].xyz, "observation", counts, linewidth=1.0)
    ax.set_title(f"scene {scene.scene_id}")
    _save(fig, out)
    return dict(counts)


def plot_prediction(pred: dict, out: Path) -> dict[str, int]:
    """History (blue), N samples per agent (green), best sample (black), truth (red)."""
    history = np.asarray(pred.get("history") or [], float)
    samples = np.asarray(pred.get("samples") or [], float)
    if history.size == 0 or samples.size == 0:
        raise ValueError("prediction set is empty")
    truth = pred.get("truth")
    best = pred.get("best_index")
    fig, ax = _new_axes()
    counts: Counter = Counter()
    for a in range(history.shape[0]):
        _line(ax, history[a], "observation", counts, linewidth=1.5)
        for s in range(samples.shape[0]):
            # samples start from the last observed point so the lines connect
            _line(ax, np.vstack([history[a, -1:], samples[s, a]]), "sample", counts, linewidth=0.7, alpha=0.8)
        if truth is not None:
            _line(ax, np.vstack([history[a, -1:], np.asarray(truth[a])]), "truth", counts, linewidth=1.2)
        if best is not None:
            _line(ax, np.vstack([history[a, -1:], samples[best[a], a]]), "best", counts, linewidth=1.2)
    ax.set_title(f"scene {pred.get('scene_id', '?')} t={pred.get('start_t', '?')}")
    _save(fig, out)
    return dict(counts)
