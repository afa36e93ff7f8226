"""Dense float tensors with reverse-mode differentiation.

Storage is 32-bit by default with 64-bit accumulation in contractions and
reductions. ``verify_mode()`` (or ``GROW_VERIFY_F64=1`` in the environment)
switches newly created tensors to 64-bit, which is what the finite-difference
gradient checks run under.
"""
from __future__ import annotations

import contextlib
import math
import os
from typing import Callable, Iterator, Sequence

import numpy as np

from .rng import Rng

_STATE = {
    "dtype": np.float64 if os.environ.get("GROW_VERIFY_F64") == "1" else np.float32,
    "grad": True,
}


class ShapeError(ValueError):
    pass


def default_dtype():
    return _STATE["dtype"]


def is_verify_mode() -> bool:
    return _STATE["dtype"] is np.float64


@contextlib.contextmanager
def verify_mode(enabled: bool = True) -> Iterator[None]:
    """Run everything created inside the block in 64-bit precision."""
    prev = _STATE["dtype"]
    _STATE["dtype"] = np.float64 if enabled else np.float32
    try:
        yield
    finally:
        _STATE["dtype"] = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _STATE["grad"]
    _STATE["grad"] = False
    try:
        yield
    finally:
        _STATE["grad"] = prev


def grad_enabled() -> bool:
    return _STATE["grad"]


class Tensor:
    """A row-major float array plus the bookkeeping reverse mode needs.

    ``_parents``/``_backward`` record the op that produced this tensor; leaves
    have neither. ``_backward(g)`` returns one gradient (or None) per parent.
    """

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or default_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(())
        if any(s < 1 for s in arr.shape):
            raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = ""

    # -- basics ---------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- autodiff -------------------------------------------------------
    def backward(self) -> None:
        backward(self)

    # -- operators ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        raise TypeError("division only by python scalars")

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


class Parameter(Tensor):
    """A trainable leaf. ``requires_grad`` may be switched off to freeze it."""

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)

    def __repr__(self):
        return f"Parameter(shape={self.shape}, dtype={self.dtype})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    track = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)), dtype=np.float64)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True, dtype=np.float64)
    return grad.reshape(shape)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf.

    Nodes are visited in reverse topological order, each exactly once.
    Calling twice without zeroing accumulates, as with leaf gradients in
    most frameworks.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor that requires grad")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                g = g.astype(node.data.dtype, copy=False)
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), bw, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(data, (a, b), bw, "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    x2 = x * x
    inner = _GELU_C * (x + 0.044715 * x2 * x)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(y.astype(x.dtype, copy=False), (a,), bw, "gelu")


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``cond`` else ``b``; all three broadcast together."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    data = np.where(cond, a.data, b.data)

    def bw(g):
        ga = _unbroadcast(np.where(cond, g, 0), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.where(cond, 0, g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(data, (a, b), bw, "where")


def masked_fill(x: Tensor, keep: np.ndarray, value: float) -> Tensor:
    keep = np.asarray(keep, dtype=bool)
    data = np.where(keep, x.data, np.asarray(value, dtype=x.dtype))
    return _make(data, (x,), lambda g: (np.where(keep, g, 0).astype(g.dtype),), "masked_fill")


# -- shape ----------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)
    return _make(data, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    data = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.ascontiguousarray(data), (a,), bw, "getitem")


# -- reductions -----------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    data = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _make(np.asarray(data), (a,), bw, "sum")


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / n)


# -- dense kernels --------------------------------------------------------

def _mm(a: np.ndarray, b: np.ndarray, out_dtype) -> np.ndarray:
    if out_dtype == np.float64:
        return np.matmul(a, b)
    return np.matmul(a.astype(np.float64), b.astype(np.float64)).astype(out_dtype)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched contraction over the last axis of ``a`` and second-to-last of ``b``.

    Accumulates in float64 and rounds to the storage dtype.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extent mismatch: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch extents do not broadcast: {a.shape} @ {b.shape}") from None
    dt = np.result_type(a.dtype, b.dtype)
    data = _mm(a.data, b.data, dt)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(_mm(g, np.swapaxes(b.data, -1, -2), dt), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(_mm(np.swapaxes(a.data, -1, -2), g, dt), b.shape)
        return ga, gb

    return _make(data, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` laid out (d_in, d_out)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    y = matmul(x, weight)
    return y if bias is None else y + bias


def layer_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis; no affine (S-AdaLN supplies it)."""
    if eps < 0:
        raise ValueError("layer_norm eps must be non-negative")
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    if eps == 0 and np.any(var == 0):
        raise ZeroDivisionError("layer_norm: zero variance row with eps=0")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    dt = x.dtype

    def bw(g):
        gd = g.astype(np.float64)
        gm = gd.mean(axis=-1, keepdims=True)
        gxm = (gd * xhat).mean(axis=-1, keepdims=True)
        return ((inv * (gd - gm - xhat * gxm)).astype(dt),)

    return _make(xhat.astype(dt), (x,), bw, "layer_norm")


def softmax_lastdim(x: Tensor) -> Tensor:
    """Row softmax with max subtraction. NaN inputs propagate."""
    xd = x.data.astype(np.float64)
    shifted = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    dt = x.dtype

    def bw(g):
        gd = g.astype(np.float64)
        dot = (gd * y).sum(axis=-1, keepdims=True)
        return ((y * (gd - dot)).astype(dt),)

    return _make(y.astype(dt), (x,), bw, "softmax")


MASK_FILL = -1e9


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """softmax(q k^T / sqrt(d) + mask) v.

    ``q`` is (B, h, Lq, d); ``k``/``v`` are (B, h, Lk, d). ``mask`` is a boolean
    keep-mask broadcastable to (B, h, Lq, Lk), typically (B, 1, 1, Lk).
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention head dim mismatch: q {q.shape} vs k {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention key/value length mismatch: {k.shape} vs {v.shape}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = matmul(q, transpose(k, (*range(k.ndim - 2), k.ndim - 1, k.ndim - 2))) * scale
    if mask is not None:
        scores = masked_fill(scores, mask, MASK_FILL)
    return matmul(softmax_lastdim(scores), v)


# -- creation -------------------------------------------------------------

def tensor_randn(shape, rng: Rng, stddev: float = 1.0, requires_grad: bool = False) -> Tensor:
    shape = tuple(shape)
    if len(shape) == 0:
        raise ShapeError("rank-0 unsupported")
    if stddev < 0:
        raise ValueError("stddev must be >= 0")
    return Tensor(rng.normal(shape, stddev), requires_grad=requires_grad)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, evaluated in float64."""
    if h <= 0:
        raise ValueError("finite-difference step h must be positive")
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    with verify_mode():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x))
            flat[i] = orig - h
            fm = float(f(x))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
    return grad
