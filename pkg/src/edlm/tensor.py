"""Dense numpy-backed tensors with tape-based reverse-mode gradients.

A :class:`Tensor` is an immutable wrapper around a read-only ``ndarray``.
Every primitive below checks its output for NaN/Inf and, when a
:class:`GradTape` is active and one of the inputs is being tracked, records a
vector-Jacobian product so that ``tape.gradient`` can replay it backwards.

Only the primitives the model needs are provided. Broadcasting is supported
for elementwise ops and for the batch dimensions of :func:`matmul`.
"""
from __future__ import annotations

import threading
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

DEFAULT_DTYPE = np.float64

_state = threading.local()


class Tensor:
    """Immutable n-dimensional float array."""

    __slots__ = ("data", "__weakref__")

    def __init__(self, data: Any, dtype: Any = None):
        if dtype is None:
            src = np.asarray(data)
            dtype = src.dtype if src.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        arr = np.array(data, dtype=dtype, copy=True)
        if not np.isfinite(arr).all():
            raise NumericError("tensor constructed from non-finite values")
        arr.flags.writeable = False
        self.data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        if arr.flags.writeable:
            arr.flags.writeable = False
        t.data = arr
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        """Return a writable copy of the underlying data."""
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.item())

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a scalar")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


def tensor(data: Any, dtype: Any = None) -> Tensor:
    return data if isinstance(data, Tensor) and dtype is None else Tensor(data, dtype)


def zeros(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor._wrap(np.zeros(shape, dtype=dtype))


def ones(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor._wrap(np.ones(shape, dtype=dtype))


# --------------------------------------------------------------------------
# tape


class GradTape:
    """Records primitive applications for reverse-mode accumulation.

    Only applications with at least one *tracked* input are recorded; a
    tensor becomes tracked by :meth:`watch` or by being the output of a
    recorded application.

    >>> with GradTape() as tape:
    ...     x = tensor([1.0, 2.0])
    ...     tape.watch(x)
    ...     y = (x * x).sum()
    >>> tape.gradient(y, x).data.tolist()
    [2.0, 4.0]
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._tracked: set[int] = set()
        self._keep: list[Tensor] = []

    def __enter__(self) -> "GradTape":
        stack = getattr(_state, "tapes", ())
        _state.tapes = stack + (self,)
        return self

    def __exit__(self, *exc) -> None:
        stack = _state.tapes
        _state.tapes = tuple(t for t in stack if t is not self)

    def watch(self, *tensors) -> None:
        for t in _flatten(tensors):
            self._tracked.add(id(t))
            self._keep.append(t)

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        if any(id(t) in self._tracked for t in inputs):
            self._nodes.append((out, inputs, vjp))
            self._tracked.add(id(out))

    def __len__(self) -> int:
        return len(self._nodes)

    def gradient(self, target: Tensor, sources):
        """Gradient of ``sum(target)`` w.r.t. ``sources``.

        ``sources`` may be a Tensor, a sequence or a dict of Tensors; the
        result has the same structure. Sources that did not take part in the
        recorded computation receive exact zeros.
        """
        keep = {id(s) for s in _flatten([sources])}
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.data)}
        for out, inputs, vjp in reversed(self._nodes):
            g = grads.get(id(out)) if id(out) in keep else grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, vjp(g)):
                if gi is None or id(inp) not in self._tracked:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi

        def lookup(s: Tensor) -> Tensor:
            g = grads.get(id(s))
            if g is None:
                return zeros(s.shape, s.dtype)
            return Tensor._wrap(np.asarray(g, dtype=s.dtype))

        if isinstance(sources, Tensor):
            return lookup(sources)
        if isinstance(sources, dict):
            return {k: lookup(v) for k, v in sources.items()}
        return [lookup(s) for s in sources]


def _flatten(items) -> Iterable[Tensor]:
    for it in items:
        if isinstance(it, Tensor):
            yield it
        elif isinstance(it, dict):
            yield from _flatten(it.values())
        else:
            yield from _flatten(it)


def primitive(name: str, out: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap ``out`` as the result of a primitive and record it on active tapes.

    ``vjp(g)`` must return one gradient (or ``None``) per input, each with the
    input's shape.
    """
    if out.dtype.kind == "f" and not np.isfinite(out).all():
        raise NumericError(f"{name} produced non-finite values")
    res = Tensor._wrap(out)
    for tape in getattr(_state, "tapes", ()):
        tape._record(res, tuple(inputs), vjp)
    return res


def stop_gradient(x: Tensor) -> Tensor:
    """Same values, but gradients are not propagated through."""
    return Tensor._wrap(x.data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data
    return primitive("add", out, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data - b.data
    return primitive("sub", out, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return _scale(a, float(b))
    if not isinstance(a, Tensor) and np.ndim(a) == 0:
        return _scale(b, float(a))
    a, b = _pair(a, b)
    out = a.data * b.data
    return primitive("mul", out, (a, b),
                     lambda g: (_unbroadcast(g * b.data, a.shape),
                                _unbroadcast(g * a.data, b.shape)))


def _scale(x: Tensor, c: float) -> Tensor:
    return primitive("scale", x.data * c, (x,), lambda g: (g * c,))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = Tensor(a, b.dtype)
    if not isinstance(b, Tensor):
        b = Tensor(b, a.dtype)
    return a, b


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    v = x.data
    v2 = v * v
    inner = _GELU_C * v * (1.0 + 0.044715 * v2)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return primitive("gelu", out, (x,), vjp)


# --------------------------------------------------------------------------
# linear algebra and shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2:
            q, r = b.shape
            gb = a.data.reshape(-1, q).T @ g.reshape(-1, r)
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return primitive("matmul", out, (a, b), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return primitive("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)
    return primitive("transpose", out, (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return primitive("concat", out, tensors, vjp)


def index(x: Tensor, key) -> Tensor:
    out = x.data[key]

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        return (gx,)

    return primitive("index", np.array(out), (x,), vjp)


def take(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"ids out of range for table with {table.shape[0]} rows")
    out = table.data[ids]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (gt,)

    return primitive("take", out, (table,), vjp)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return primitive("sum", np.asarray(out), (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


# --------------------------------------------------------------------------
# normalisation, attention probabilities, loss


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """``x / sqrt(mean(x**2) + eps) * gain`` over the last axis."""
    if gain.ndim != 1 or x.shape[-1] != gain.shape[0]:
        raise ShapeError(f"rms_norm gain {gain.shape} does not match input {x.shape}")
    v = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        r = 1.0 / np.sqrt(np.mean(v * v, axis=-1, keepdims=True) + eps)
        xhat = v * r
    out = xhat * gain.data

    def vjp(g):
        dxhat = g * gain.data
        dx = r * (dxhat - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
        dgain = (g * xhat).reshape(-1, gain.shape[0]).sum(axis=0)
        return dx, dgain

    return primitive("rms_norm", out, (x, gain), vjp)


def _as_mask(mask) -> np.ndarray:
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    return m if m.dtype == bool else m > 0.5


def masked_softmax(logits: Tensor, mask) -> Tensor:
    """Softmax over the last axis restricted to entries where ``mask`` is 1.

    Masked entries come out exactly 0. ``mask`` broadcasts against
    ``logits``; a row with no visible entry is an error.
    """
    vis = _as_mask(mask)
    try:
        vis = np.broadcast_to(vis, logits.shape)
    except ValueError:
        raise ShapeError(f"mask {vis.shape} does not broadcast to logits {logits.shape}") from None
    if vis.shape[-1] and not vis.any(axis=-1).all():
        raise ShapeError("masked_softmax: a row has no visible entry")
    z = np.where(vis, logits.data, -np.inf)
    zmax = np.max(z, axis=-1, keepdims=True) if z.shape[-1] else z
    e = np.where(vis, np.exp(z - zmax), 0.0)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

    return primitive("masked_softmax", p, (logits,), vjp)


def log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, labels, weights=None) -> Tensor:
    """Weighted mean negative log-likelihood of integer ``labels``.

    ``logits`` has shape ``labels.shape + (V,)``; ``weights`` (same shape as
    labels, default ones) selects which positions count, e.g. non-pad.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.shape[:-1] != labels.shape:
        raise ShapeError(f"logits {logits.shape} do not match labels {labels.shape}")
    w = np.ones(labels.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise ShapeError("cross_entropy: no position has positive weight")
    logp = log_softmax(logits.data)
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    out = np.asarray(-(w * picked).sum() / total, dtype=logits.dtype)

    def vjp(g):
        p = np.exp(logp)
        np.put_along_axis(p, labels[..., None],
                          np.take_along_axis(p, labels[..., None], axis=-1) - 1.0, axis=-1)
        return (p * (w / total * g)[..., None],)

    return primitive("cross_entropy", out, (logits,), vjp)
