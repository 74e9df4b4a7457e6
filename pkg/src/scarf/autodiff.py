"""Minimal dense tensors with tape-based reverse-mode gradients.

Everything is float64 and row-major. Feature maps follow the ``[H, W, c]``
convention (optionally with a leading batch axis), and token ``q`` of a map
is ``i * W + j``.

Operations record themselves on the innermost active :class:`Tape`; outside
any tape they run as plain numpy code with no bookkeeping::

    with Tape() as tape:
        loss = sum_(linear(x, w, b))
    backward(tape, loss)
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields, is_dataclass
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor", "Parameter", "Tape", "Linear", "DimensionError", "NonFiniteError",
    "as_tensor", "linear", "softmax", "layer_norm", "bilinear_sample", "conv1x1",
    "add", "sub", "mul", "scale", "neg", "sum_", "mean", "reshape", "transpose",
    "concat", "stack", "slice_", "gelu", "abs_", "bce_with_logits",
    "backward", "zero_grads", "finite_diff_grad", "named_parameters",
    "record_sample_points", "min_grid_distance", "save_parameters", "load_parameters",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


_TAPES: list["Tape"] = []
_SAMPLE_PROBES: list[list[np.ndarray]] = []


class Tensor:
    """Immutable float64 array with shape metadata."""

    __slots__ = ("data",)

    def __init__(self, data, *, _trusted: bool = False):
        arr = data if _trusted else np.array(data, dtype=np.float64)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if not _trusted and not np.isfinite(arr).all():
            raise NonFiniteError("tensor contains non-finite values")
        if not isinstance(self, Parameter):
            arr.flags.writeable = False
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"{type(self).__name__}(shape={self.shape})"


class Parameter(Tensor):
    """Trainable tensor. Its data is mutable in place (optimizer steps, finite differences)."""

    __slots__ = ("grad", "name")

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=np.float64))
        self.grad = np.zeros_like(self.data)
        self.name = name

    @property
    def value(self) -> "Parameter":
        return self

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


class Tape:
    """Ordered record of executed differentiable operations."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._outputs: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: _Node) -> None:
        self.nodes.append(node)
        self._outputs.add(id(node.out))

    def contains(self, t: Tensor) -> bool:
        return id(t) in self._outputs


def _emit(op: str, out: np.ndarray, parents: tuple[Tensor, ...], grad_fn, check: bool = True) -> Tensor:
    if check and not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    t = Tensor(out, _trusted=True)
    if _TAPES:
        _TAPES[-1].record(_Node(t, parents, grad_fn, op))
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(x, s: float) -> Tensor:
    x = as_tensor(x)
    return _emit("scale", x.data * s, (x,), lambda g: (g * s,))


def neg(x) -> Tensor:
    return scale(x, -1.0)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is None:
            g = g.reshape(())
        elif not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", np.asarray(out, dtype=np.float64), (x,), grad_fn)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = math.prod(x.shape[a] for a in axes)
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {old} to {tuple(shape)}") from exc
    return _emit("reshape", out, (x,), lambda g: (g.reshape(old),), check=False)


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _emit("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (g.transpose(inv),), check=False)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concatenate shapes {[x.shape for x in xs]}") from exc
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _emit("concat", out, xs, lambda g: tuple(np.split(g, splits, axis=axis)), check=False)


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    try:
        out = np.stack([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot stack shapes {[x.shape for x in xs]}") from exc
    n = len(xs)
    return _emit("stack", out, xs,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)), check=False)


def slice_(x, key) -> Tensor:
    """Basic (non-advanced) indexing, e.g. ``slice_(t, (Ellipsis, slice(0, 2)))``."""
    x = as_tensor(x)
    shape = x.shape

    def grad_fn(g):
        full = np.zeros(shape)
        full[key] = g
        return (full,)

    return _emit("slice", np.array(x.data[key]), (x,), grad_fn, check=False)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    d = x.data
    t = np.tanh(_GELU_C * (d + 0.044715 * d ** 3))
    out = 0.5 * d * (1.0 + t)

    def grad_fn(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * d * d)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * dt),)

    return _emit("gelu", out, (x,), grad_fn)


def abs_(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    return _emit("abs", np.abs(d), (x,), lambda g: (g * np.sign(d),))


def bce_with_logits(logits, targets) -> Tensor:
    """Elementwise binary cross-entropy on raw logits. Targets are constants."""
    z = as_tensor(logits)
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    if y.shape != z.shape:
        raise DimensionError(f"bce_with_logits: logits {z.shape} vs targets {y.shape}")
    d = z.data
    out = np.maximum(d, 0.0) - d * y + np.log1p(np.exp(-np.abs(d)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * d))
    return _emit("bce_with_logits", out, (z,), lambda g: (g * (sig - y),))


# ---------------------------------------------------------------------------
# layers


def linear(x, w, b=None) -> Tensor:
    """``out[..., j] = sum_i x[..., i] * w[i, j] + b[j]``."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise DimensionError(f"linear: bias {b.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd
    if b is not None:
        out = out + b.data
    out = out.reshape(xd.shape[:-1] + (wd.shape[1],))

    def grad_fn(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape)
        gw = x2.T @ g2
        return (gx, gw) if b is None else (gx, gw, g2.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _emit("linear", out, parents, grad_fn)


def conv1x1(x, w, b=None) -> Tensor:
    """Pointwise linear map over the channel axis of ``[..., H, W, cin]``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim < 3:
        raise DimensionError(f"conv1x1 expects [..., H, W, c], got {x.shape}")
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"conv1x1: {x.shape[-1]} input channels vs weight {w.shape}")
    lead = x.shape[:-1]
    flat = reshape(x, (-1, x.shape[-1]))
    return reshape(linear(flat, w, b), lead + (w.shape[1],))


def softmax(x, axes: int = 1) -> Tensor:
    """Softmax over the trailing group of ``axes`` axes (max-subtracted)."""
    x = as_tensor(x)
    if axes < 1 or axes > x.ndim:
        raise ValueError(f"softmax: need 1..{x.ndim} trailing axes, got {axes}")
    shape = x.shape
    lead = shape[: x.ndim - axes]
    flat = x.data.reshape(lead + (-1,))
    e = np.exp(flat - flat.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        g = g.reshape(s.shape)
        return ((s * (g - (g * s).sum(axis=-1, keepdims=True))).reshape(shape),)

    return _emit("softmax", s.reshape(shape), (x,), grad_fn)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm: input {x.shape} vs gamma {gamma.shape}, beta {beta.shape}")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data
    lead_axes = tuple(range(d.ndim - 1))

    def grad_fn(g):
        dxh = g * gd
        gx = inv * (dxh - dxh.mean(axis=-1, keepdims=True)
                    - xhat * (dxh * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead_axes), g.sum(axis=lead_axes)

    return _emit("layer_norm", xhat * gd + beta.data, (x, gamma, beta), grad_fn)


def bilinear_sample(feat, pts) -> Tensor:
    """Bilinear interpolation of ``feat[H, W, c]`` at fractional ``pts[N, 2]`` (row, col).

    A leading group axis is allowed: ``feat[G, H, W, c]`` with ``pts[G, N, 2]``.
    Out-of-range neighbours read as zero. At exactly integer coordinates the
    location gradient is taken from the cell above/right of the point (the one
    whose lower corner is ``floor(p)``).
    """
    feat, pts = as_tensor(feat), as_tensor(pts)
    grouped = feat.ndim == 4
    f = feat.data if grouped else feat.data[None]
    p = pts.data if grouped else pts.data[None]
    if f.ndim != 4 or p.ndim != 3 or p.shape[-1] != 2 or p.shape[0] != f.shape[0]:
        raise DimensionError(f"bilinear_sample: feat {feat.shape} vs pts {pts.shape}")
    G, H, W, C = f.shape
    if _SAMPLE_PROBES:
        _SAMPLE_PROBES[-1].append(p.copy())
    # fully outside beyond one cell is all-zero either way; clipping keeps indices small
    y = np.minimum(np.maximum(p[..., 0], -2.0), H + 1.0)
    x = np.minimum(np.maximum(p[..., 1], -2.0), W + 1.0)
    y0 = np.floor(y)
    x0 = np.floor(x)
    wy1, wx1 = y - y0, x - x0
    wy0, wx0 = 1.0 - wy1, 1.0 - wx1
    y0i, x0i = y0.astype(np.int64), x0.astype(np.int64)
    flat = f.reshape(G * H * W, C)
    base = (np.arange(G) * (H * W))[:, None]

    corners = []
    for dy, dx, w in ((0, 0, wy0 * wx0), (0, 1, wy0 * wx1), (1, 0, wy1 * wx0), (1, 1, wy1 * wx1)):
        yi, xi = y0i + dy, x0i + dx
        valid = (yi >= 0) & (yi < H) & (xi >= 0) & (xi < W)
        idx = base + np.minimum(np.maximum(yi, 0), H - 1) * W + np.minimum(np.maximum(xi, 0), W - 1)
        vals = flat[idx] * valid[..., None]
        corners.append((idx, valid, w, vals))
    out = sum(w[..., None] * vals for _, _, w, vals in corners)

    def grad_fn(g):
        g = g if grouped else g[None]
        gflat = np.zeros_like(flat)
        for idx, valid, w, _ in corners:
            contrib = (w * valid)[..., None] * g
            np.add.at(gflat, idx.reshape(-1), contrib.reshape(-1, C))
        (_, _, _, v00), (_, _, _, v01), (_, _, _, v10), (_, _, _, v11) = corners
        dv_dy = wx0[..., None] * (v10 - v00) + wx1[..., None] * (v11 - v01)
        dv_dx = wy0[..., None] * (v01 - v00) + wy1[..., None] * (v11 - v10)
        gp = np.stack([(g * dv_dy).sum(-1), (g * dv_dx).sum(-1)], axis=-1)
        gfeat = gflat.reshape(f.shape)
        if not grouped:
            return gfeat[0], gp[0]
        return gfeat, gp

    return _emit("bilinear_sample", out if grouped else out[0], (feat, pts), grad_fn)


class record_sample_points:
    """Collect every ``pts`` array passed to :func:`bilinear_sample` inside the block."""

    def __enter__(self) -> list[np.ndarray]:
        self.points: list[np.ndarray] = []
        _SAMPLE_PROBES.append(self.points)
        return self.points

    def __exit__(self, *exc) -> None:
        _SAMPLE_PROBES.remove(self.points)


def min_grid_distance(points: list[np.ndarray]) -> float:
    """Smallest distance of any recorded coordinate to an integer grid line."""
    if not points:
        return math.inf
    flat = np.concatenate([p.reshape(-1) for p in points])
    return float(np.abs(flat - np.round(flat)).min())


@dataclass
class Linear:
    """Weight ``[in, out]`` and bias ``[out]`` pair."""

    weight: Parameter
    bias: Parameter

    def __call__(self, x) -> Tensor:
        return linear(x, self.weight, self.bias)

    @classmethod
    def init(cls, fan_in: int, fan_out: int, rng: np.random.Generator, *, zero: bool = False) -> "Linear":
        if zero:
            w = np.zeros((fan_in, fan_out))
        else:
            bound = 1.0 / math.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        return cls(Parameter(w), Parameter(np.zeros(fan_out)))


# ---------------------------------------------------------------------------
# gradients


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into ``param.grad`` for every reachable Parameter."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.contains(loss):
        raise ValueError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    params: dict[int, Parameter] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None:
                continue
            key = id(parent)
            if isinstance(parent, Parameter):
                params[key] = parent
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for key, p in params.items():
        p.grad = p.grad + grads[key]


def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
    """Walk dataclasses, lists and dicts, yielding ``(dotted_name, Parameter)``."""
    if isinstance(obj, Parameter):
        yield prefix, obj
    elif is_dataclass(obj):
        for f in fields(obj):
            yield from named_parameters(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_parameters(item, f"{prefix}.{i}" if prefix else str(i))
    elif isinstance(obj, dict):
        for k, item in obj.items():
            yield from named_parameters(item, f"{prefix}.{k}" if prefix else str(k))


def zero_grads(obj) -> None:
    for _, p in named_parameters(obj):
        p.zero_grad()


def finite_diff_grad(f: Callable[[], float], p: Parameter, h: float = 1e-5) -> Tensor:
    """Central differences of the scalar ``f()`` w.r.t. every element of ``p``.

    ``p`` is perturbed in place and restored; analytic grads are never read.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    flat = p.data.reshape(-1)
    out = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f())
        flat[i] = orig - h
        fm = float(f())
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return Tensor(out.reshape(p.shape))


# ---------------------------------------------------------------------------
# checkpoints: {"format": "scarf-params-v1", "params": {name: {"shape": [...], "values": [...]}}}


def save_parameters(obj, path) -> None:
    payload = {
        "format": "scarf-params-v1",
        "params": {name: {"shape": list(p.shape), "values": p.data.reshape(-1).tolist()}
                   for name, p in named_parameters(obj)},
    }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_parameters(obj, path) -> None:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    stored = payload["params"]
    for name, p in named_parameters(obj):
        if name not in stored:
            raise KeyError(f"checkpoint has no entry for {name!r}")
        entry = stored[name]
        if tuple(entry["shape"]) != p.shape:
            raise DimensionError(f"{name}: checkpoint shape {entry['shape']} vs parameter {p.shape}")
        p.data[...] = np.asarray(entry["values"], dtype=np.float64).reshape(p.shape)
