"""TrajAirNet: TCN trajectory encoders, CNN wind encoder, multi-head graph
attention over agents, a CVAE and an acceleration head whose output is
integrated into absolute positions with a Verlet recurrence.

Several windows can be evaluated at once by stacking their agents along
the first axis; ``groups`` then tells the attention layer which agents
share a window so no attention crosses window boundaries.

Units: positions enter and leave in meters and accelerations are in
m/s^2. Internally the network sees positions in kilometers and wind in
units of 10 m/s so that activations stay O(1).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .dataset import SequenceWindow
from .diffcore import Tensor


@dataclass(frozen=True)
class ModelConfig:
    tcn_channels: int = 32
    tcn_kernel: int = 4
    tcn_layers: int = 2
    cnn_channels: int = 16
    cnn_kernel: int = 3
    gat_heads: int = 4
    gat_dim: int = 32
    cvae_latent_dim: int = 64
    mlp_hidden: int = 64
    t_obs: int = 11
    t_pred: int = 120
    delta_t: float = 1.0
    position_scale_m: float = 1000.0
    wind_scale_mps: float = 10.0
    leaky_slope: float = 0.2

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"ModelConfig.{f.name} must be positive")
        if self.gat_dim % self.gat_heads:
            raise ValueError("gat_dim must be divisible by gat_heads")
        if self.t_obs < 2:
            raise ValueError("t_obs must be >= 2")
        if self.delta_t != 1.0:
            raise ValueError("delta_t must match the 1 Hz grid (1.0 s)")

    @property
    def dilations(self) -> tuple[int, ...]:
        return tuple(2**i for i in range(self.tcn_layers))

    @property
    def enc_dim(self) -> int:
        return self.tcn_channels + self.cnn_channels

    @property
    def cond_dim(self) -> int:
        return self.enc_dim + self.gat_dim

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


Params = dict[str, Tensor]


def init_params(cfg: ModelConfig, seed: int = 0) -> Params:
    """He-style normal initialisation, zero biases.

    The final head layer starts at 1e-3 of its usual scale so an untrained
    model is close to the constant-velocity predictor; the posterior output
    layers start at 1e-2 so the initial posterior is near N(0, I).
    """
    rng = np.random.default_rng(seed)
    shapes: dict[str, tuple[int, ...]] = {}

    def tcn_shapes(prefix, c_in):
        for i in range(cfg.tcn_layers):
            cin = c_in if i == 0 else cfg.tcn_channels
            shapes[f"{prefix}.conv{i}.w"] = (cfg.tcn_kernel, cin, cfg.tcn_channels)
            shapes[f"{prefix}.conv{i}.b"] = (cfg.tcn_channels,)
        shapes[f"{prefix}.skip.w"] = (c_in, cfg.tcn_channels)

    tcn_shapes("tcn_obs", 3)
    tcn_shapes("tcn_pred", 3)
    shapes["wind.conv.w"] = (cfg.cnn_kernel, 2, cfg.cnn_channels)
    shapes["wind.conv.b"] = (cfg.cnn_channels,)
    per_head = cfg.gat_dim // cfg.gat_heads
    shapes["gat.w"] = (cfg.enc_dim, cfg.gat_dim)
    shapes["gat.a_src"] = (cfg.gat_heads, per_head)
    shapes["gat.a_dst"] = (cfg.gat_heads, per_head)
    shapes["q.w"] = (cfg.tcn_channels + cfg.cond_dim, cfg.mlp_hidden)
    shapes["q.b"] = (cfg.mlp_hidden,)
    shapes["q.mu.w"] = (cfg.mlp_hidden, cfg.cvae_latent_dim)
    shapes["q.mu.b"] = (cfg.cvae_latent_dim,)
    shapes["q.logvar.w"] = (cfg.mlp_hidden, cfg.cvae_latent_dim)
    shapes["q.logvar.b"] = (cfg.cvae_latent_dim,)
    shapes["p.w"] = (cfg.cvae_latent_dim + cfg.cond_dim, cfg.mlp_hidden)
    shapes["p.b"] = (cfg.mlp_hidden,)
    shapes["head.h.w"] = (cfg.mlp_hidden, cfg.mlp_hidden)
    shapes["head.h.b"] = (cfg.mlp_hidden,)
    shapes["head.out.w"] = (cfg.mlp_hidden, cfg.t_pred * 3)
    shapes["head.out.b"] = (cfg.t_pred * 3,)

    params: Params = {}
    for name in sorted(shapes):
        shape = shapes[name]
        if name.endswith(".b"):
            data = np.zeros(shape)
        elif name.startswith("gat.a_"):
            data = rng.normal(0.0, 1.0 / np.sqrt(shape[1]), shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            data = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
            if name == "head.out.w":
                data *= 1e-3
            elif name in ("q.mu.w", "q.logvar.w"):
                data *= 1e-2
        params[name] = dc.parameter(data, name)
    return params


def params_to_arrays(params: Params) -> dict[str, np.ndarray]:
    return {k: v.data for k, v in params.items()}


# ----------------------------------------------------------------------
# batching


@dataclass
class Batch:
    """Agents of one or more windows stacked along the first axis."""

    history: np.ndarray  # (A, t_obs, 3) m
    wind: np.ndarray  # (A, t_obs, 2) m/s
    groups: np.ndarray  # (A,) window index of each agent
    future: np.ndarray | None = None  # (A, t_pred, 3) m

    @property
    def agents(self) -> int:
        return self.history.shape[0]

    @property
    def mask(self) -> np.ndarray:
        return self.groups[:, None] == self.groups[None, :]


def collate(windows: Sequence[SequenceWindow], with_future: bool = True) -> Batch:
    if not windows:
        raise ValueError("cannot collate an empty window list")
    groups = np.concatenate([np.full(w.agents, i) for i, w in enumerate(windows)])
    return Batch(
        np.concatenate([w.history for w in windows]),
        np.concatenate([w.wind_hist for w in windows]),
        groups,
        np.concatenate([w.future for w in windows]) if with_future else None,
    )


# ----------------------------------------------------------------------
# encoders


def _tcn(params: Params, cfg: ModelConfig, prefix: str, x: Tensor) -> Tensor:
    """Causal dilated TCN with a linear skip; returns the last-step features."""
    h = x
    for i, dilation in enumerate(cfg.dilations):
        h = dc.relu(
            dc.causal_conv1d(h, params[f"{prefix}.conv{i}.w"], params[f"{prefix}.conv{i}.b"], dilation)
        )
    h = h + dc.linear(x, params[f"{prefix}.skip.w"])
    steps = x.shape[1]
    return h[:, steps - 1, :]


def encode_history(params: Params, cfg: ModelConfig, history: np.ndarray) -> Tensor:
    """h_obs per agent from the absolute-coordinate history (A, t_obs, 3) in meters."""
    return _tcn(params, cfg, "tcn_obs", dc.Tensor(history / cfg.position_scale_m))


def encode_future(params: Params, cfg: ModelConfig, future: np.ndarray) -> Tensor:
    return _tcn(params, cfg, "tcn_pred", dc.Tensor(future / cfg.position_scale_m))


def encode_wind(params: Params, cfg: ModelConfig, wind: np.ndarray) -> Tensor:
    w = dc.Tensor(wind / cfg.wind_scale_mps)
    h = dc.relu(dc.causal_conv1d(w, params["wind.conv.w"], params["wind.conv.b"]))
    return h.mean(axis=1)


def encode_context(params: Params, cfg: ModelConfig, h_obs: Tensor, wind: np.ndarray) -> Tensor:
    """h_enc = h_obs concatenated with the encoded wind sequence."""
    return dc.concat([h_obs, encode_wind(params, cfg, wind)], axis=-1)


def social_attention(
    params: Params, cfg: ModelConfig, h_enc: Tensor, mask: np.ndarray | None = None
) -> tuple[Tensor, np.ndarray]:
    """Multi-head graph attention over agents (self-edges included).

    Returns h_gat (A, gat_dim) and the attention weights (heads, A, A);
    row i of each head holds agent i's weights over its neighbours.
    """
    n = h_enc.shape[0]
    heads = cfg.gat_heads
    per_head = cfg.gat_dim // heads
    wh = dc.linear(h_enc, params["gat.w"]).reshape(n, heads, per_head).transpose(1, 0, 2)
    src = (wh * params["gat.a_src"].reshape(heads, 1, per_head)).sum(axis=-1)
    dst = (wh * params["gat.a_dst"].reshape(heads, 1, per_head)).sum(axis=-1)
    scores = dc.leaky_relu(src.reshape(heads, n, 1) + dst.reshape(heads, 1, n), cfg.leaky_slope)
    if mask is None:
        mask = np.ones((n, n), dtype=bool)
    alpha = dc.softmax(scores, axis=-1, mask=mask[None, :, :])
    out = dc.matmul(alpha, wh).transpose(1, 0, 2).reshape(n, cfg.gat_dim)
    return dc.elu(out), alpha.data


def condition(params: Params, cfg: ModelConfig, batch: Batch) -> tuple[Tensor, np.ndarray]:
    """CVAE conditioning vector h_enc ⊕ h_gat per agent, plus attention weights."""
    h_obs = encode_history(params, cfg, batch.history)
    h_enc = encode_context(params, cfg, h_obs, batch.wind)
    h_gat, alpha = social_attention(params, cfg, h_enc, batch.mask)
    return dc.concat([h_enc, h_gat], axis=-1), alpha


# ----------------------------------------------------------------------
# CVAE


def _decoder(params: Params, z: Tensor, cond: Tensor) -> Tensor:
    return dc.relu(dc.linear(dc.concat([z, cond], axis=-1), params["p.w"], params["p.b"]))


def cvae_train_forward(
    params: Params,
    cfg: ModelConfig,
    h_pred: Tensor,
    cond: Tensor,
    eps: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Posterior pathway: returns (z, h_cvae, mu, log_var).

    ``eps`` overrides the standard-normal draw (eps = 0 gives z = mu).
    """
    h = dc.relu(dc.linear(dc.concat([h_pred, cond], axis=-1), params["q.w"], params["q.b"]))
    mu = dc.linear(h, params["q.mu.w"], params["q.mu.b"])
    log_var = dc.linear(h, params["q.logvar.w"], params["q.logvar.b"])
    if eps is None:
        rng = rng if rng is not None else np.random.default_rng()
        eps = rng.standard_normal(mu.shape)
    z = mu + dc.exp(log_var * 0.5) * dc.Tensor(eps)
    return z, _decoder(params, z, cond), mu, log_var


def cvae_sample_forward(
    params: Params, cfg: ModelConfig, cond: Tensor, rng: np.random.Generator
) -> Tensor:
    """Prior pathway: z ~ N(0, I) decoded with the same conditioning."""
    z = dc.Tensor(rng.standard_normal((cond.shape[0], cfg.cvae_latent_dim)))
    return _decoder(params, z, cond)


# ----------------------------------------------------------------------
# head and kinematics


@dataclass
class PredictionSample:
    accelerations: np.ndarray  # (A, t_pred, 3) m/s^2
    positions: np.ndarray  # (A, t_pred, 3) m


def rollout(accel, history: np.ndarray, delta_t: float = 1.0) -> Tensor:
    """Verlet integration anchored at the last two observed positions."""
    return dc.verlet_rollout(accel, history[:, -1, :], history[:, -2, :], delta_t)


def head(params: Params, cfg: ModelConfig, h_cvae: Tensor) -> Tensor:
    h = dc.relu(dc.linear(h_cvae, params["head.h.w"], params["head.h.b"]))
    out = dc.linear(h, params["head.out.w"], params["head.out.b"])
    return out.reshape(h_cvae.shape[0], cfg.t_pred, 3)


def head_and_rollout(
    params: Params, cfg: ModelConfig, h_cvae: Tensor, history: np.ndarray
) -> tuple[Tensor, Tensor]:
    """Returns (accelerations, positions) as graph tensors."""
    accel = head(params, cfg, h_cvae)
    return accel, rollout(accel, history, cfg.delta_t)


# ----------------------------------------------------------------------
# full passes


@dataclass
class TrainOutputs:
    positions: Tensor
    mu: Tensor
    log_var: Tensor
    alpha: np.ndarray


def forward_train(
    params: Params, cfg: ModelConfig, batch: Batch, rng: np.random.Generator, eps=None
) -> TrainOutputs:
    if batch.future is None:
        raise ValueError("training forward needs the ground-truth future")
    cond, alpha = condition(params, cfg, batch)
    h_pred = encode_future(params, cfg, batch.future)
    _, h_cvae, mu, log_var = cvae_train_forward(params, cfg, h_pred, cond, eps=eps, rng=rng)
    _, positions = head_and_rollout(params, cfg, h_cvae, batch.history)
    return TrainOutputs(positions, mu, log_var, alpha)


def sample(
    params: Params, cfg: ModelConfig, batch: Batch, rng: np.random.Generator, n: int
) -> list[PredictionSample]:
    """Draw ``n`` futures for every agent; the encoders run once."""
    cond, _ = condition(params, cfg, batch)
    out = []
    for _ in range(n):
        h_cvae = cvae_sample_forward(params, cfg, cond, rng)
        accel, positions = head_and_rollout(params, cfg, h_cvae, batch.history)
        out.append(PredictionSample(accel.data, positions.data))
    return out


# ----------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: Path, params: Params, cfg: ModelConfig, meta: dict | None = None) -> bytes:
    blob = dc.dump_parameters(params_to_arrays(params), {"model_config": cfg.to_dict(), **(meta or {})})
    Path(path).write_bytes(blob)
    return blob


def load_checkpoint(path: Path, expect: ModelConfig | None = None) -> tuple[Params, ModelConfig, dict]:
    arrays, meta = dc.load_parameters(Path(path).read_bytes())
    if "model_config" not in meta:
        raise ValueError("checkpoint carries no model config")
    cfg = ModelConfig.from_dict(meta["model_config"])
    if expect is not None and expect != cfg:
        raise ValueError("checkpoint model config does not match the requested config")
    reference = init_params(cfg, 0)
    if sorted(reference) != sorted(arrays):
        raise ValueError("checkpoint parameter names do not match the model config")
    for name, ref in reference.items():
        if ref.shape != arrays[name].shape:
            raise ValueError(f"checkpoint parameter {name} has shape {arrays[name].shape}, expected {ref.shape}")
    params = {k: dc.parameter(arrays[k], k) for k in sorted(arrays)}
    return params, cfg, meta
