"""Small reverse-mode autodiff engine over float64 numpy arrays.

Only the operations the trajectory model needs are provided. Every op
records a closure that pushes the output gradient back to its inputs;
:func:`backward` walks the graph in reverse topological order.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _check_finite(values: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"non-finite values produced by {op}")


def _node(values: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    """Wrap an op result. ``backward(g)`` returns one gradient (or None) per parent."""
    _check_finite(values, op)
    out = Tensor(values)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ----------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), backward, "mul")


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return _node(y, (x,), lambda g: (g * y,), "exp")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x, negative_slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    slope = np.where(x.data > 0, 1.0, negative_slope)
    return _node(x.data * slope, (x,), lambda g: (g * slope,), "leaky_relu")


def elu(x, alpha: float = 1.0) -> Tensor:
    x = as_tensor(x)
    neg = alpha * np.expm1(np.minimum(x.data, 0.0))
    dy = np.where(x.data > 0, 1.0, neg + alpha)
    return _node(np.where(x.data > 0, x.data, neg), (x,), lambda g: (g * dy,), "elu")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


# ----------------------------------------------------------------------
# shape and reduction


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return _node(y, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def take(x, index) -> Tensor:
    """Basic or advanced indexing; gradients scatter-add back."""
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(np.array(x.data[index], dtype=DTYPE), (x,), backward, "take")


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    y = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=DTYPE)
    return _node(y, (x,), backward, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.data.size
    else:
        count = int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat: empty input list")
    ax = axis % xs[0].ndim
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or any(
            s0 != s1 for i, (s0, s1) in enumerate(zip(xs[0].shape, x.shape)) if i != ax
        ):
            raise ShapeError(
                f"concat: incompatible shapes {xs[0].shape} and {x.shape} on axis {axis}"
            )
    splits = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return _node(
        np.concatenate([x.data for x in xs], axis=ax),
        xs,
        lambda g: tuple(np.split(g, splits, axis=ax)),
        "concat",
    )


# ----------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data @ b.data, (a, b), backward, "matmul")


def linear(x, W, b=None) -> Tensor:
    """y = x @ W + b with x of shape (..., in) and W of shape (in, out)."""
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {W.shape}")
    parents = [x, W]
    y = x.data @ W.data
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise ShapeError(f"linear: bias {b.shape} does not match weight {W.shape}")
        parents.append(b)
        y = y + b.data
    n_in, n_out = W.shape

    def backward(g):
        g2 = g.reshape(-1, n_out)
        gx = g @ W.data.T if x.requires_grad else None
        gw = x.data.reshape(-1, n_in).T @ g2 if W.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _node(y, parents, backward, "linear")


def causal_conv1d(x, kernels, bias=None, dilation: int = 1) -> Tensor:
    """Dilated causal 1-D convolution.

    x has shape (batch, time, c_in), kernels (k, c_in, c_out). Inputs are
    zero-padded on the left only, so output step t sees inputs <= t. The
    last kernel tap aligns with the current step.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if x.ndim != 3 or kernels.ndim != 3 or x.shape[2] != kernels.shape[1]:
        raise ShapeError(f"causal_conv1d: input {x.shape} does not match kernels {kernels.shape}")
    if dilation < 1:
        raise ValueError("dilation must be >= 1")
    n, steps, c_in = x.shape
    k, _, c_out = kernels.shape
    parents = [x, kernels]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeError(f"causal_conv1d: bias {bias.shape} does not match kernels {kernels.shape}")
        parents.append(bias)
    pad = (k - 1) * dilation
    padded = np.concatenate([np.zeros((n, pad, c_in)), x.data], axis=1)
    cols = np.concatenate(
        [padded[:, j * dilation : j * dilation + steps, :] for j in range(k)], axis=2
    )
    flat_w = kernels.data.reshape(k * c_in, c_out)
    y = cols @ flat_w
    if bias is not None:
        y = y + bias.data

    def backward(g):
        g2 = g.reshape(-1, c_out)
        gk = (cols.reshape(-1, k * c_in).T @ g2).reshape(k, c_in, c_out) if kernels.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = g @ flat_w.T
            gpad = np.zeros_like(padded)
            for j in range(k):
                gpad[:, j * dilation : j * dilation + steps, :] += gcols[:, :, j * c_in : (j + 1) * c_in]
            gx = gpad[:, pad:, :]
        if bias is None:
            return gx, gk
        return gx, gk, g2.sum(axis=0)

    return _node(y, parents, backward, "causal_conv1d")


# ----------------------------------------------------------------------
# normalisation and losses


def softmax(x, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get weight 0."""
    x = as_tensor(x)
    if mask is None:
        e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not np.all(mask.any(axis=axis)):
            raise ValueError("softmax: a row has no unmasked entries")
        masked = np.where(mask, x.data, -np.inf)
        e = np.where(mask, np.exp(masked - masked.max(axis=axis, keepdims=True)), 0.0)
    y = e / e.sum(axis=axis, keepdims=True)
    return _node(
        y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),), "softmax"
    )


def mse(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    scale = 2.0 / diff.size
    with np.errstate(over="ignore"):
        value = np.asarray(np.mean(diff * diff))
    return _node(
        value,
        (pred, target),
        lambda g: (g * scale * diff, -g * scale * diff),
        "mse",
    )


def gaussian_kl(mu, log_var) -> Tensor:
    """KL(N(mu, exp(log_var)) || N(0, I)) summed over every element."""
    mu, log_var = as_tensor(mu), as_tensor(log_var)
    if mu.shape != log_var.shape:
        raise ShapeError(f"gaussian_kl: mu {mu.shape} vs log_var {log_var.shape}")
    _check_finite(log_var.data, "gaussian_kl")
    var = np.exp(log_var.data)
    value = -0.5 * np.sum(1.0 + log_var.data - mu.data**2 - var)
    return _node(
        np.asarray(value),
        (mu, log_var),
        lambda g: (g * mu.data, g * 0.5 * (var - 1.0)),
        "gaussian_kl",
    )


# ----------------------------------------------------------------------
# kinematics


def verlet_rollout(accel, x_last, x_prev, dt: float = 1.0) -> Tensor:
    """Roll x_{t+1} = 2 x_t - x_{t-1} + s_t dt^2 forward over the time axis.

    accel has shape (agents, steps, 3); x_last and x_prev (agents, 3) are
    constants. Returns positions (agents, steps, 3).
    """
    accel = as_tensor(accel)
    cur = np.array(x_last.data if isinstance(x_last, Tensor) else x_last, dtype=DTYPE)
    prev = np.array(x_prev.data if isinstance(x_prev, Tensor) else x_prev, dtype=DTYPE)
    if accel.ndim != 3 or cur.shape != (accel.shape[0], accel.shape[2]) or prev.shape != cur.shape:
        raise ShapeError(
            f"verlet_rollout: accelerations {accel.shape} vs anchors {cur.shape}/{prev.shape}"
        )
    dt2 = dt * dt
    out = np.empty(accel.shape, dtype=DTYPE)
    for t in range(accel.shape[1]):
        nxt = 2.0 * cur - prev + accel.data[:, t, :] * dt2
        out[:, t, :] = nxt
        prev, cur = cur, nxt

    def backward(g):
        # output k depends on s_j (j <= k) with weight (k - j + 1) dt^2
        tail = np.cumsum(g[:, ::-1, :], axis=1)
        return (np.cumsum(tail, axis=1)[:, ::-1, :] * dt2,)

    return _node(out, (accel,), backward, "verlet_rollout")


# ----------------------------------------------------------------------
# graph traversal


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.array(g, dtype=DTYPE)
            else:
                node.grad = node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            _check_finite(pg, "backward")
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg


# ----------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState) -> None:
    """One in-place Adam update; parameters without a gradient count as zero-gradient."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1**state.step
    correction2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if m.shape != p.shape:
            raise ShapeError(f"adam_step: moment shape {m.shape} vs parameter {name} {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = state.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)
        p.data -= update


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ----------------------------------------------------------------------
# checkpoint file
#
# layout: MAGIC | u32 version | u64 header_len | header JSON (utf-8)
#         | raw little-endian float64 blocks in header order

MAGIC = b"TRAJCKPT"
CHECKPOINT_VERSION = 1


def dump_parameters(params: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    names = sorted(params)
    table = [{"name": n, "shape": list(np.shape(params[n]))} for n in names]
    header = json.dumps({"params": table, "meta": meta or {}}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
    buf.write(header)
    for n in names:
        buf.write(np.ascontiguousarray(params[n], dtype="<f8").tobytes())
    return buf.getvalue()


def load_parameters(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[: len(MAGIC)] != MAGIC:
        raise ValueError("not a parameter checkpoint (bad magic)")
    offset = len(MAGIC)
    version, header_len = struct.unpack_from("<IQ", blob, offset)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    offset += struct.calcsize("<IQ")
    header = json.loads(blob[offset : offset + header_len].decode())
    offset += header_len
    params = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape)
        params[entry["name"]] = arr.astype(DTYPE)
        offset += 8 * count
    if offset != len(blob):
        raise ValueError("checkpoint has trailing bytes")
    return params, header["meta"]
