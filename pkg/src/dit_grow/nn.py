"""Parameter containers: a minimal Module plus the layers the DiT needs."""
from __future__ import annotations

import copy
import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Parameter, Tensor


class Module:
    """Walks attributes in definition order to enumerate parameters.

    Parameters, sub-modules and lists of sub-modules are discovered
    automatically; anything else (configs, flags) is ignored.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{key}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def clone(self):
        out = copy.deepcopy(self)
        out.zero_grad()
        return out

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


def _init_weight(rng: Rng, d_in: int, d_out: int) -> np.ndarray:
    return rng.normal((d_in, d_out), 1.0 / math.sqrt(d_in))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: Rng | None = None):
        w = _init_weight(rng, d_in, d_out) if rng is not None else np.zeros((d_in, d_out))
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out))

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)

    def zero_(self) -> None:
        self.weight.data[...] = 0
        self.bias.data[...] = 0


class Attention(Module):
    """Multi-head attention; ``out`` is the sub-layer's last linear.

    Queries come from width ``d``; keys and values from width ``d_kv``
    (``d_kv == d`` for self-attention).
    """

    def __init__(self, d: int, d_kv: int, heads: int, rng: Rng | None = None):
        if d % heads:
            raise ValueError(f"hidden width {d} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d_kv, d, rng)
        self.v = Linear(d_kv, d, rng)
        self.out = Linear(d, d, rng)

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return x.reshape(b, n, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, context: Tensor | None = None, mask: np.ndarray | None = None) -> Tensor:
        """``x`` is (B, Lq, d); ``context`` (B, Lk, d_kv) defaults to ``x``.

        ``mask`` is a (B, Lk) boolean keep-mask over context positions.
        """
        ctx = x if context is None else context
        q, k, v = self._split(self.q(x)), self._split(self.k(ctx)), self._split(self.v(ctx))
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)[:, None, None, :]
        h = T.scaled_dot_product_attention(q, k, v, mask)
        b, _, n, dh = h.shape
        return self.out(h.transpose(0, 2, 1, 3).reshape(b, n, self.heads * dh))


class FeedForward(Module):
    def __init__(self, d: int, mult: int, rng: Rng | None = None):
        self.fc1 = Linear(d, mult * d, rng)
        self.fc2 = Linear(mult * d, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class ConditionEmbedder(Module):
    """Trainable positionwise two-layer MLP over frozen encoder outputs."""

    def __init__(self, d_in: int, d_out: int, rng: Rng | None = None, activation: str = "gelu"):
        if activation not in ("gelu", "identity"):
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        self.fc1 = Linear(d_in, d_out, rng)
        self.fc2 = Linear(d_out, d_out, rng)

    def __call__(self, c: Tensor) -> Tensor:
        if c.shape[-1] != self.fc1.d_in:
            raise T.ShapeError(f"condition width {c.shape[-1]} != embedder input width {self.fc1.d_in}")
        h = self.fc1(c)
        if self.activation == "gelu":
            h = T.gelu(h)
        return self.fc2(h)
