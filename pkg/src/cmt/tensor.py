"""Dense float64 tensors with tape-based reverse-mode differentiation.

Tensors are immutable wrappers around C-ordered ``numpy`` arrays. Operations
record themselves on the active :class:`Tape` (if any of their inputs is
tracked by it) and add multiply-accumulate counts to every active
:class:`MacCounter`.

Typical use::

    with Tape() as tape:
        w = tape.watch(Tensor(np.ones((3, 2))))
        loss = sum_(matmul(x, w))
    grads = tape.backward(loss)
    grads[w]          # ndarray shaped like w
"""
from __future__ import annotations

import math
from collections import Counter
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError, ParameterError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_TAPE: ContextVar[Optional["Tape"]] = ContextVar("cmt_tape", default=None)
_COUNTERS: ContextVar[tuple] = ContextVar("cmt_mac_counters", default=())


def _check_finite(arr: np.ndarray, label: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{label} produced a non-finite value")


class Tensor:
    """Immutable n-dimensional float64 array."""

    __slots__ = ("_data", "__weakref__")

    def __init__(self, data: ArrayLike):
        if isinstance(data, Tensor):
            arr = data._data
        else:
            arr = np.array(data, dtype=np.float64, order="C", copy=True)
            if any(d <= 0 for d in arr.shape):
                raise DimensionError(f"tensor dimensions must be positive, got {arr.shape}")
            _check_finite(arr, "Tensor()")
            arr.setflags(write=False)
        self._data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64, order="C")
        arr.setflags(write=False)
        t._data = arr
        return t

    @property
    def data(self) -> np.ndarray:
        """Read-only view of the values."""
        return self._data

    @property
    def shape(self) -> tuple:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    @property
    def flat(self) -> np.ndarray:
        """Row-major flat values."""
        return self._data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        if self._data.size != 1:
            raise DimensionError(f"item() needs a single element, shape is {self.shape}")
        return float(self._data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, data={np.array2string(self._data, threshold=8)})"

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

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return NotImplemented

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    out: Tensor
    inputs: tuple
    backward: BackwardFn
    label: str


class Gradients:
    """Mapping from tracked tensors to their accumulated gradient arrays."""

    def __init__(self, tape: "Tape", grads: dict):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        key = id(t)
        if key in self._grads:
            return self._grads[key]
        if self._tape.is_tracked(t):
            return np.zeros(t.shape)
        raise KeyError("tensor is not tracked by this tape")

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads


class Tape:
    """Append-only record of differentiable operations.

    A tape is single-writer. Leaves become differentiable through
    :meth:`watch`; every operation consuming a tracked tensor while the tape
    is active appends a node, so nodes are stored in topological order.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._tracked: dict[int, Tensor] = {}
        self._token = None

    def __enter__(self) -> "Tape":
        if self._token is not None:
            raise ContractError("tape is already active")
        self._token = _TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE.reset(self._token)
        self._token = None

    def watch(self, *tensors: Tensor):
        for t in tensors:
            self._tracked[id(t)] = t
        return tensors[0] if len(tensors) == 1 else tensors

    def is_tracked(self, t: Tensor) -> bool:
        return id(t) in self._tracked

    def _append(self, out: Tensor, inputs: tuple, backward: BackwardFn, label: str) -> None:
        self._tracked[id(out)] = out
        self.nodes.append(Node(out, inputs, backward, label))

    def backward(self, root: Tensor) -> Gradients:
        if root.size != 1:
            raise ContractError(f"backward root must be scalar, got shape {root.shape}")
        if not self.is_tracked(root):
            raise ContractError("backward root was not produced on this tape")
        grads = {id(root): np.ones(root.shape)}
        for node in reversed(self.nodes):
            g = grads.get(id(node.out))
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not self.is_tracked(t):
                    continue
                _check_finite(gi, f"{node.label} backward")
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return Gradients(self, grads)


def backward(tape: Tape, root: Tensor) -> Gradients:
    return tape.backward(root)


class MacCounter:
    """Counts scalar multiply-accumulates performed inside a ``with`` scope."""

    def __init__(self):
        self.macs = 0
        self.breakdown: Counter = Counter()
        self._token = None

    def __enter__(self) -> "MacCounter":
        self.macs = 0
        self.breakdown = Counter()
        self._token = _COUNTERS.set(_COUNTERS.get() + (self,))
        return self

    def __exit__(self, *exc) -> None:
        _COUNTERS.reset(self._token)
        self._token = None

    def add(self, label: str, n: int) -> None:
        self.macs += n
        self.breakdown[label] += n


def _count(label: str, n: int) -> None:
    for c in _COUNTERS.get():
        c.add(label, n)


def _make(out: np.ndarray, inputs: Iterable[Tensor], backward_fn: BackwardFn, label: str) -> Tensor:
    _check_finite(out, label)
    result = Tensor._wrap(out)
    tape = _TAPE.get()
    if tape is not None:
        inputs = tuple(inputs)
        if any(tape.is_tracked(t) for t in inputs):
            tape._append(result, inputs, backward_fn, label)
    return result


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, d in enumerate(shape):
        if d == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: cannot combine shapes {a.shape} and {b.shape}") from None
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise DimensionError(f"sub: cannot combine shapes {a.shape} and {b.shape}") from None
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: cannot combine shapes {a.shape} and {b.shape}") from None

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), bw, "mul")


def scale(x: ArrayLike, s: float) -> Tensor:
    x = as_tensor(x)
    s = float(s)
    return _make(x.data * s, (x,), lambda g: (g * s,), "scale")


def exp(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _make(out, (x,), lambda g: (g / x.data,), "log")


def clip(x: ArrayLike, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    out = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(out, (x,), lambda g: (g * inside,), "clip")


def sigmoid(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def dropout(x: ArrayLike, p: float, rng: Optional[np.random.Generator], training: bool = True) -> Tensor:
    """Inverted dropout; the identity in evaluation mode or when ``p == 0``."""
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an explicit generator")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


# ---------------------------------------------------------------- reductions


def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, tuple(sorted(axes)))
    return np.broadcast_to(g, shape)


def sum_(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    return _make(out, (x,), lambda g: (_expand_reduced(g, x.shape, axis, keepdims).copy(),), "sum")


def mean(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    n = x.size // out.size

    def bw(g):
        return (_expand_reduced(g, x.shape, axis, keepdims) / n,)

    return _make(out, (x,), bw, "mean")


def global_avg_pool(x: ArrayLike) -> Tensor:
    """Mean over the two trailing (spatial) axes."""
    return mean(x, axis=(-2, -1))


def softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {x.shape}")
    if x.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def layer_norm(x: ArrayLike, gamma: ArrayLike, beta: ArrayLike, eps: float = 1e-5) -> Tensor:
    """Normalize over the last (channel) axis with learnable scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm: scale/shift {gamma.shape}/{beta.shape} do not match channels {c}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), bw, "layer_norm")


# ---------------------------------------------------------------- linear algebra


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product over the trailing two axes; leading batch axes must agree."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] \
            or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    m, k = a.shape[-2:]
    n = b.shape[-1]
    batch = math.prod(a.shape[:-2])
    _count("matmul", batch * m * n * k)
    out = np.matmul(a.data, b.data)

    def bw(g):
        _count("matmul.backward", 2 * batch * m * n * k)
        return np.matmul(g, np.swapaxes(b.data, -1, -2)), np.matmul(np.swapaxes(a.data, -1, -2), g)

    return _make(out, (a, b), bw, "matmul")


def conv2d(x: ArrayLike, kernel: ArrayLike, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``[c_in, h, w]`` (or ``[n, c_in, h, w]``) with ``[c_out, c_in, k, k]``."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or kernel.ndim != 4 or kernel.shape[1] != xd.shape[1]:
        raise DimensionError(f"conv2d: incompatible input {x.shape} and kernel {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ParameterError(f"conv2d: bad stride {stride} / padding {padding}")
    n, cin, h, w = xd.shape
    cout, _, kh, kw = kernel.shape
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(f"conv2d: kernel {kernel.shape} larger than padded input {x.shape}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    cols = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # cols: (n, cin, ho, wo, kh, kw)
    _count("conv2d", n * cout * cin * kh * kw * ho * wo)
    out = np.tensordot(cols, kernel.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def bw(g):
        g4 = g[None] if single else g
        _count("conv2d.backward", 2 * n * cout * cin * kh * kw * ho * wo)
        gk = np.tensordot(g4, cols, axes=([0, 2, 3], [0, 2, 3]))
        gcols = np.tensordot(g4, kernel.data, axes=([1], [0]))  # (n, ho, wo, cin, kh, kw)
        gxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + w]
        return (gx[0] if single else gx), gk

    return _make(out[0] if single else out, (x, kernel), bw, "conv2d")


def pool2d(x: ArrayLike, size: int, stride: Optional[int] = None, mode: str = "max") -> Tensor:
    """Max or average pooling over the two trailing axes.

    The max gradient goes to the first maximal element of each window in
    row-major order (the lowest flat index).
    """
    x = as_tensor(x)
    stride = size if stride is None else stride
    if x.ndim < 2:
        raise DimensionError(f"pool2d needs at least 2 axes, got {x.shape}")
    h, w = x.shape[-2:]
    if size < 1 or stride < 1:
        raise ParameterError(f"pool2d: bad size {size} / stride {stride}")
    if size > h or size > w:
        raise DimensionError(f"pool2d: window {size} larger than input {x.shape}")
    if mode not in ("max", "average"):
        raise ParameterError(f"pool2d: unknown mode {mode!r}")
    ho = (h - size) // stride + 1
    wo = (w - size) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, (size, size), axis=(-2, -1))
    win = win[..., ::stride, ::stride, :, :][..., :ho, :wo, :, :]
    flat = win.reshape(win.shape[:-2] + (size * size,))
    k2 = size * size

    if mode == "max":
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

        def bw(g):
            gx = np.zeros(x.shape)
            for o in range(k2):
                di, dj = divmod(o, size)
                gx[..., di:di + stride * ho:stride, dj:dj + stride * wo:stride] += g * (idx == o)
            return (gx,)
    else:
        out = flat.mean(axis=-1)

        def bw(g):
            gx = np.zeros(x.shape)
            for o in range(k2):
                di, dj = divmod(o, size)
                gx[..., di:di + stride * ho:stride, dj:dj + stride * wo:stride] += g / k2
            return (gx,)

    return _make(out, (x,), bw, f"{mode}_pool")


# ---------------------------------------------------------------- layout


def reshape(x: ArrayLike, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if -1 not in shape and math.prod(shape) != x.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def permute(x: ArrayLike, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise DimensionError(f"permute: {axes} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "permute")


def nearest_upsample(x: ArrayLike, factor: int) -> Tensor:
    """Replicate every cell of the two trailing axes ``factor`` times in each direction."""
    x = as_tensor(x)
    if factor < 1:
        raise ParameterError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    out = np.repeat(np.repeat(x.data, factor, axis=-2), factor, axis=-1)
    h, w = x.shape[-2:]

    def bw(g):
        return (g.reshape(g.shape[:-2] + (h, factor, w, factor)).sum(axis=(-3, -1)),)

    return _make(out, (x,), bw, "upsample")
