"""Training loop, baselines and best-of-N ADE/FDE evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .dataset import SequenceWindow
from .model import (
    Batch,
    ModelConfig,
    Params,
    PredictionSample,
    collate,
    forward_train,
    init_params,
    load_checkpoint,
    rollout,
    sample,
    save_checkpoint,
)

log = logging.getLogger(__name__)

DEFAULT_SAMPLES = 5


@dataclass(frozen=True)
class LossReport:
    l_traj: float
    l_cvae: float

    @property
    def l_total(self) -> float:
        return self.l_traj + self.l_cvae


def combined_loss(
    positions, future: np.ndarray, mu, log_var, cfg: ModelConfig
) -> tuple[dc.Tensor, LossReport]:
    """Trajectory MSE (km^2) plus KL to N(0, I) summed over latent dims, averaged over agents."""
    scale = 1.0 / cfg.position_scale_m
    l_traj = dc.mse(dc.as_tensor(positions) * scale, dc.Tensor(future * scale))
    l_cvae = dc.gaussian_kl(mu, log_var) * (1.0 / mu.shape[0])
    total = l_traj + l_cvae
    return total, LossReport(float(l_traj.data), float(l_cvae.data))


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, checkpoint: Path | None):
        where = f"; parameters before the failing step saved to {checkpoint}" if checkpoint else ""
        super().__init__(f"non-finite loss at step {step}{where}")
        self.step = step
        self.checkpoint = checkpoint


@dataclass
class TrainResult:
    params: Params
    cfg: ModelConfig
    history: list[LossReport] = field(default_factory=list)
    steps: int = 0


def train(
    windows: Sequence[SequenceWindow],
    cfg: ModelConfig,
    epochs: int = 1,
    seed: int = 0,
    *,
    batch_size: int = 32,
    learning_rate: float = 1e-4,
    max_steps: int | None = None,
    params: Params | None = None,
    diagnostic_path: Path | None = None,
    progress: Callable[[int, LossReport], None] | None = None,
) -> TrainResult:
    """Adam over shuffled mini-batches of windows.

    Everything random (init, shuffling, reparameterisation noise) flows
    from ``seed``, so two runs with equal arguments give identical
    parameters.
    """
    if not windows:
        raise ValueError("training set is empty")
    for w in windows:
        if w.history.shape[1] != cfg.t_obs or w.future.shape[1] != cfg.t_pred:
            raise ValueError(
                f"window horizon {w.history.shape[1]}/{w.future.shape[1]} does not match "
                f"model {cfg.t_obs}/{cfg.t_pred}"
            )
    rng = np.random.default_rng(seed)
    params = params if params is not None else init_params(cfg, int(rng.integers(2**31)))
    state = dc.AdamState(learning_rate=learning_rate)
    result = TrainResult(params, cfg)
    for epoch in range(epochs):
        order = rng.permutation(len(windows))
        for lo in range(0, len(order), batch_size):
            if max_steps is not None and result.steps >= max_steps:
                return result
            batch = collate([windows[i] for i in order[lo : lo + batch_size]])
            try:
                out = forward_train(params, cfg, batch, rng)
                loss, report = combined_loss(out.positions, batch.future, out.mu, out.log_var, cfg)
                if not math.isfinite(report.l_total):
                    raise dc.NonFiniteError("loss")
                dc.backward(loss)
            except dc.NonFiniteError:
                if diagnostic_path is not None:
                    save_checkpoint(diagnostic_path, params, cfg, {"diverged_at_step": result.steps})
                raise TrainingDiverged(result.steps, diagnostic_path) from None
            dc.adam_step(params, state)
            dc.zero_grad(params.values())
            result.steps += 1
            result.history.append(report)
            if progress is not None:
                progress(result.steps, report)
        log.info("epoch %d done, last loss %.6f", epoch, result.history[-1].l_total)
    return result


# ----------------------------------------------------------------------
# metrics


def ade_fde(prediction: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    """Mean and final Euclidean displacement, inputs in meters, results in km."""
    prediction, truth = np.asarray(prediction, float), np.asarray(truth, float)
    if prediction.shape != truth.shape:
        raise ValueError(f"prediction {prediction.shape} and truth {truth.shape} differ")
    if prediction.ndim != 2 or prediction.shape[0] == 0:
        raise ValueError("expected a non-empty (steps, dims) trajectory")
    dist = np.linalg.norm(prediction - truth, axis=-1) / 1000.0
    return float(dist.mean()), float(dist[-1])


def best_of_n(samples: Sequence[np.ndarray], truth: np.ndarray) -> tuple[float, float]:
    """Lowest ADE among the samples, paired with that same sample's FDE.

    Ties keep the first sample.
    """
    if len(samples) == 0:
        raise ValueError("best_of_n needs at least one sample")
    best = None
    for s in samples:
        score = ade_fde(s, truth)
        if best is None or score[0] < best[0]:
            best = score
    return best


def best_sample_index(samples: Sequence[np.ndarray], truth: np.ndarray) -> int:
    ades = [ade_fde(s, truth)[0] for s in samples]
    return int(np.argmin(ades))


# ----------------------------------------------------------------------
# predictors


Predictor = Callable[[Batch, np.random.Generator, int], list[PredictionSample]]


def baseline_const_velocity(history: np.ndarray, t_pred: int, delta_t: float = 1.0) -> PredictionSample:
    """Verlet rollout with zero acceleration (shares the model's rollout path)."""
    accel = np.zeros((history.shape[0], t_pred, 3))
    return PredictionSample(accel, rollout(accel, history, delta_t).data)


class NearestNeighborIndex:
    """Stored (history, future) pairs; query by L2 distance on the history."""

    def __init__(self, histories: np.ndarray, futures: np.ndarray):
        histories = np.asarray(histories, float)
        futures = np.asarray(futures, float)
        if len(histories) == 0:
            raise ValueError("nearest-neighbour index is empty")
        if len(histories) != len(futures):
            raise ValueError("histories and futures differ in count")
        self.histories = histories
        self.futures = futures

    @classmethod
    def from_windows(cls, windows: Sequence[SequenceWindow]) -> "NearestNeighborIndex":
        if not windows:
            raise ValueError("nearest-neighbour index is empty")
        return cls(
            np.concatenate([w.history for w in windows]),
            np.concatenate([w.future for w in windows]),
        )

    def __len__(self) -> int:
        return len(self.histories)

    def query(self, history: np.ndarray) -> int:
        """Index of the closest stored history; ties go to the lowest index."""
        d = ((self.histories - history[None]) ** 2).sum(axis=(1, 2))
        return int(np.argmin(d))


def baseline_nearest_neighbor(history: np.ndarray, index: NearestNeighborIndex) -> PredictionSample:
    futures = np.stack([index.futures[index.query(h)] for h in history])
    return PredictionSample(np.full(futures.shape, np.nan), futures)


def const_velocity_predictor(t_pred: int) -> Predictor:
    def predict_batch(batch, rng, n):
        return [baseline_const_velocity(batch.history, t_pred)]

    return predict_batch


def nearest_neighbor_predictor(index: NearestNeighborIndex) -> Predictor:
    def predict_batch(batch, rng, n):
        return [baseline_nearest_neighbor(batch.history, index)]

    return predict_batch


def model_predictor(params: Params, cfg: ModelConfig) -> Predictor:
    def predict_batch(batch, rng, n):
        return sample(params, cfg, batch, rng, n)

    return predict_batch


def predict(
    checkpoint: Path, window: SequenceWindow, n: int = DEFAULT_SAMPLES, seed: int = 0,
    expect: ModelConfig | None = None,
) -> list[PredictionSample]:
    """N independent futures for every agent of ``window``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    params, cfg, _ = load_checkpoint(checkpoint, expect)
    if window.history.shape[1] != cfg.t_obs:
        raise ValueError(f"window t_obs {window.history.shape[1]} does not match checkpoint {cfg.t_obs}")
    return sample(params, cfg, collate([window], with_future=False), np.random.default_rng(seed), n)


# ----------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    ade_km: float
    fde_km: float
    n_samples: int
    n_windows: int
    n_agents: int = 0
    per_window_ade: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "ade_km": self.ade_km,
            "fde_km": self.fde_km,
            "n_samples": self.n_samples,
            "n_windows": self.n_windows,
            "n_agents": self.n_agents,
        }


def evaluate(
    predictor: Predictor,
    windows: Sequence[SequenceWindow],
    n: int = DEFAULT_SAMPLES,
    seed: int = 0,
    batch_size: int = 64,
) -> EvalResult:
    """Mean best-of-N ADE/FDE (km) over every agent of every window.

    Windows are processed in order with a single seeded generator, so the
    result is a pure function of the arguments.
    """
    if not windows:
        raise ValueError("test set is empty")
    rng = np.random.default_rng(seed)
    ades: list[float] = []
    fdes: list[float] = []
    per_window: list[float] = []
    for lo in range(0, len(windows), batch_size):
        chunk = windows[lo : lo + batch_size]
        batch = collate(chunk, with_future=False)
        samples = predictor(batch, rng, n)
        row = 0
        for w in chunk:
            window_ades = []
            for k in range(w.agents):
                a, f = best_of_n([s.positions[row] for s in samples], w.future[k])
                ades.append(a)
                fdes.append(f)
                window_ades.append(a)
                row += 1
            per_window.append(float(np.mean(window_ades)))
    return EvalResult(
        float(np.mean(ades)), float(np.mean(fdes)), n, len(windows), len(ades), per_window
    )
