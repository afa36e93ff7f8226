"""Adam over named parameter arrays."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamState:
    """First/second moments and step count, per parameter name.

    Per-name step counts let freshly added parameters start with unbiased
    moments while older parameters keep their history. Moments are stored in
    the parameter dtype (the update itself is computed in float64) so they
    checkpoint bit-exactly.
    """

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: dict[str, int] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """In-place Adam update of every array in ``params`` that has a gradient."""
    for name, g in grads.items():
        if g is None:
            continue
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {name}")
        g64 = g.astype(np.float64)
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
            state.step[name] = 0
        t = state.step[name] + 1
        state.step[name] = t
        m = beta1 * state.m[name].astype(np.float64) + (1.0 - beta1) * g64
        v = beta2 * state.v[name].astype(np.float64) + (1.0 - beta2) * g64 * g64
        state.m[name] = m.astype(p.dtype)
        state.v[name] = v.astype(p.dtype)
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
    return state
