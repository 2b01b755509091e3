"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` whenever
one of their inputs requires a gradient.  Outside a tape every operation is a
plain numpy computation, which is how inference runs.

>>> x = Tensor([1.0, 2.0], requires_grad=True)
>>> with Tape() as tape:
...     loss = (x * x).sum()
>>> backward(loss, tape)
>>> x.grad
array([2., 4.])
"""

from __future__ import annotations

import os
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    ConfigurationError,
    ContractError,
    DegenerateBatchError,
    DimensionError,
    LabelError,
)

__all__ = [
    "Tensor",
    "Tape",
    "RunningStats",
    "backward",
    "add",
    "concat",
    "conv3d",
    "relu",
    "batch_norm",
    "global_avg_pool",
    "fully_connected",
    "softmax",
    "softmax_cross_entropy",
    "mse_distance",
    "feature_distance",
    "sgd_step",
    "SGD",
]


def _limit_threads() -> None:
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return
    threadpool_limits(int(os.environ.get("BERS_THREADS", "1")))


_limit_threads()


class Record(NamedTuple):
    op: str
    inputs: tuple
    output: "Tensor"
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered log of differentiable operations.

    Use as a context manager; nested tapes shadow outer ones.
    """

    def __init__(self):
        self.records: list[Record] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.pop()

    def __len__(self) -> int:
        return len(self.records)

    def ops(self) -> list[str]:
        return [r.op for r in self.records]


class Tensor:
    """A float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr is data:
            arr = arr.copy()
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._tape: Tape | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = requires_grad
        t._tape = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, _scale(other, -1.0))

    def __neg__(self):
        return _scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return _mul(self, other)
        return _scale(self, float(other))

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        return _sum(self)


def _emit(op: str, data: np.ndarray, inputs: tuple, bwd) -> Tensor:
    tape = _ACTIVE[-1] if _ACTIVE else None
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(np.asarray(data, dtype=np.float64), needs)
    if needs:
        out._tape = tape
        tape.records.append(Record(op, inputs, out, bwd))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else loss._tape
    if tape is None or loss._tape is not tape:
        raise ContractError("loss was not produced on the given tape")
    pending: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for rec in reversed(tape.records):
        g = pending.pop(id(rec.output), None)
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.is_leaf:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            else:
                key = id(t)
                pending[key] = pending[key] + gi if key in pending else gi


# --------------------------------------------------------------------- basic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def _scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def _mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _emit("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def _sum(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat along axis {axis}: {exc}") from None
    cuts = np.cumsum(sizes)[:-1]

    def bwd(g):
        return np.split(g, cuts, axis=axis)

    return _emit("concat", data, tensors, bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,))


# ------------------------------------------------------------------- conv3d


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(i) for i in v)
    if len(t) != 3:
        raise ConfigurationError(f"expected 3 values, got {v!r}")
    return t


def conv3d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride=1,
    padding=0,
    groups: int = 1,
) -> Tensor:
    """Grouped 3-D cross-correlation over ``[N, C, T, H, W]`` input."""
    st, pd = _triple(stride), _triple(padding)
    if x.ndim != 5:
        raise DimensionError(f"conv3d input must be [N,C,T,H,W], got shape {x.shape}")
    if weight.ndim != 5:
        raise DimensionError(f"conv3d weight must be [Co,Ci/g,kT,kH,kW], got shape {weight.shape}")
    n, c, *space = x.shape
    co, cg, *ks = weight.shape
    if groups < 1 or c % groups or co % groups:
        raise ConfigurationError(f"groups={groups} must divide in_channels={c} and out_channels={co}")
    if cg != c // groups:
        raise DimensionError(f"channel axis: weight expects {cg * groups} input channels, input has {c}")
    if bias is not None and bias.shape != (co,):
        raise DimensionError(f"bias must have shape ({co},), got {bias.shape}")
    out_sp = []
    for axis, size, k, s, p in zip("THW", space, ks, st, pd):
        if size + 2 * p < k:
            raise DimensionError(f"{axis} axis: kernel {k} exceeds padded size {size + 2 * p}")
        out_sp.append((size + 2 * p - k) // s + 1)
    to, ho, wo = out_sp
    kt, kh, kw = ks
    g_, og = groups, co // groups
    kk = cg * kt * kh * kw
    npos = to * ho * wo
    w2 = weight.data.reshape(g_, og, kk)

    xp = x.data
    if any(pd):
        xp = np.pad(xp, ((0, 0), (0, 0), (pd[0],) * 2, (pd[1],) * 2, (pd[2],) * 2))
    pshape = xp.shape
    # Polyphase split: with stride s, kernel offset a reads phase a % s at
    # shift a // s, so every gather below is a unit-stride slice.
    phase_keys = [(i, j, k) for i in range(st[0]) for j in range(st[1]) for k in range(st[2])]
    xg = xp.reshape(n, g_, cg, *pshape[2:])
    if st == (1, 1, 1):
        phases = {(0, 0, 0): xg}
    else:
        phases = {key: np.ascontiguousarray(xg[:, :, :, key[0] :: st[0], key[1] :: st[1], key[2] :: st[2]]) for key in phase_keys}
    taps = [
        ((a, b, e), (a % st[0], b % st[1], e % st[2]),
         (slice(a // st[0], a // st[0] + to), slice(b // st[1], b // st[1] + ho), slice(e // st[2], e // st[2] + wo)))
        for a in range(kt) for b in range(kh) for e in range(kw)
    ]
    if kk == cg:
        (_, key, sl), = taps
        col = np.ascontiguousarray(phases[key][:, :, :, sl[0], sl[1], sl[2]]).reshape(n, g_, kk, npos)
    else:
        col = np.empty((n, g_, cg, kt, kh, kw, to, ho, wo))
        for (a, b, e), key, sl in taps:
            col[:, :, :, a, b, e] = phases[key][:, :, :, sl[0], sl[1], sl[2]]
        col = col.reshape(n, g_, kk, npos)
    out = np.matmul(w2, col).reshape(n, co, to, ho, wo)
    if bias is not None:
        out += bias.data[None, :, None, None, None]

    def bwd(g):
        gg = g.reshape(n, g_, og, npos)
        dw = np.matmul(gg, col.transpose(0, 1, 3, 2)).sum(axis=0).reshape(weight.shape)
        db = g.sum(axis=(0, 2, 3, 4)) if bias is not None else None
        dx = None
        if x.requires_grad:
            dcol = np.matmul(w2.transpose(0, 2, 1), gg).reshape(n, g_, cg, kt, kh, kw, to, ho, wo)
            dph = {key: np.zeros(ph.shape) for key, ph in phases.items()}
            for (a, b, e), key, sl in taps:
                dph[key][:, :, :, sl[0], sl[1], sl[2]] += dcol[:, :, :, a, b, e]
            if st == (1, 1, 1):
                dxp = dph[(0, 0, 0)].reshape(pshape)
            else:
                dxp = np.empty((n, g_, cg, *pshape[2:]))
                for key, arr in dph.items():
                    dxp[:, :, :, key[0] :: st[0], key[1] :: st[1], key[2] :: st[2]] = arr
                dxp = dxp.reshape(pshape)
            dx = dxp[:, :, pd[0] : pshape[2] - pd[0], pd[1] : pshape[3] - pd[1], pd[2] : pshape[4] - pd[2]]
        return (dx, dw, db) if bias is not None else (dx, dw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _emit("conv3d", out, inputs, bwd)


# --------------------------------------------------------------- batch norm


class RunningStats:
    """Per-channel running mean and variance used by eval-mode batch norm."""

    def __init__(self, channels: int):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)


def batch_norm(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    stats: RunningStats,
    train: bool,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    if x.ndim < 2:
        raise DimensionError(f"batch_norm input must be [N,C,...], got shape {x.shape}")
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise DimensionError(f"batch_norm scale/shift must have shape ({c},)")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    count = x.data.size // c
    if train:
        if count < 2:
            raise DegenerateBatchError("train-mode batch_norm needs at least 2 values per channel")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        stats.mean = (1 - momentum) * stats.mean + momentum * mean
        stats.var = (1 - momentum) * stats.var + momentum * var * (count / (count - 1))
    else:
        mean, var = stats.mean, stats.var
    inv = (1.0 / np.sqrt(var + eps)).reshape(bshape)
    xhat = (x.data - mean.reshape(bshape)) * inv
    out = xhat * scale.data.reshape(bshape) + shift.data.reshape(bshape)

    def bwd(g):
        dscale = (g * xhat).sum(axis=axes)
        dshift = g.sum(axis=axes)
        dxhat = g * scale.data.reshape(bshape)
        if train:
            dx = (inv / count) * (
                count * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            dx = dxhat * inv
        return dx, dscale, dshift

    return _emit("batch_norm", out, (x, scale, shift), bwd)


# ------------------------------------------------------------- pooling / fc


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over every axis after the channel axis: ``[N,C,...] -> [N,C]``."""
    if x.ndim < 3:
        raise DimensionError(f"global_avg_pool needs [N,C,...], got shape {x.shape}")
    axes = tuple(range(2, x.ndim))
    shape = x.shape
    vol = int(np.prod(shape[2:]))

    def bwd(g):
        return (np.broadcast_to(g.reshape(g.shape + (1,) * len(axes)) / vol, shape).copy(),)

    return _emit("global_avg_pool", x.data.mean(axis=axes), (x,), bwd)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2:
        raise DimensionError(f"fully_connected needs [N,D] input and [K,D] weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"feature axis: input has D={x.shape[1]}, weight expects {weight.shape[1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"bias must have shape ({weight.shape[0]},), got {bias.shape}")
        out = out + bias.data

    def bwd(g):
        grads = (g @ weight.data, g.T @ x.data)
        return grads + (g.sum(axis=0),) if bias is not None else grads

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _emit("fully_connected", out, inputs, bwd)


# ------------------------------------------------------------------- losses


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch-mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    if logits.ndim != 2:
        raise DimensionError(f"logits must be [N,K], got shape {logits.shape}")
    n, k = logits.shape
    y = np.asarray(labels)
    if y.shape != (n,):
        raise DimensionError(f"labels must have shape ({n},), got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer) or y.min(initial=0) < 0 or y.max(initial=0) >= k:
        raise LabelError(f"labels must be integers in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(n)
    loss = -logp[rows, y].mean()

    def bwd(g):
        d = np.exp(logp)
        d[rows, y] -= 1.0
        return (d * (g / n),)

    return _emit("softmax_cross_entropy", np.asarray(loss), (logits,), bwd)


def mse_distance(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mse_distance: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    size = diff.size

    def bwd(g):
        d = diff * (2.0 * g / size)
        return d, -d

    return _emit("mse_distance", np.asarray(np.mean(diff * diff)), (a, b), bwd)


def feature_distance(a: Tensor, b: Tensor, kind: str = "mse") -> Tensor:
    """Distance between two feature batches.

    ``"mse"`` is the mean squared difference over all elements, ``"sq_l2"``
    the per-sample squared Euclidean norm averaged over the batch and ``"l2"``
    the per-sample Euclidean norm averaged over the batch.
    """
    if kind == "mse":
        return mse_distance(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"feature_distance: shapes {a.shape} and {b.shape} differ")
    if kind not in ("sq_l2", "l2"):
        raise ConfigurationError(f"unknown distance kind {kind!r}")
    n = a.shape[0]
    diff = (a.data - b.data).reshape(n, -1)
    sq = (diff * diff).sum(axis=1)
    if kind == "sq_l2":
        value = sq.mean()

        def bwd(g):
            d = (diff * (2.0 * g / n)).reshape(a.shape)
            return d, -d

    else:
        norm = np.sqrt(sq)
        value = norm.mean()
        safe = np.where(norm > 0, norm, 1.0)

        def bwd(g):
            d = (diff * (g / n) / safe[:, None]) * (norm > 0)[:, None]
            d = d.reshape(a.shape)
            return d, -d

    return _emit(f"distance_{kind}", np.asarray(value), (a, b), bwd)


# ---------------------------------------------------------------- optimizer


def sgd_step(
    params: Mapping[str, Tensor],
    lr: float,
    momentum: float,
    velocity: dict[str, np.ndarray],
) -> None:
    """In-place momentum SGD: ``v = momentum*v + g; w -= lr*v``."""
    if lr <= 0:
        raise ConfigurationError(f"lr must be positive, got {lr}")
    if not 0 <= momentum < 1:
        raise ConfigurationError(f"momentum must lie in [0, 1), got {momentum}")
    for name, p in params.items():
        if p.grad is None:
            continue
        v = velocity.get(name)
        v = p.grad.copy() if v is None else momentum * v + p.grad
        velocity[name] = v
        p.data -= lr * v


class SGD:
    def __init__(self, params: Mapping[str, Tensor], lr: float, momentum: float = 0.0):
        self.params = dict(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self) -> None:
        sgd_step(self.params, self.lr, self.momentum, self.velocity)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
