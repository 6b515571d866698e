from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class UninitializedGradientError(RuntimeError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state: AdamState, names=None) -> None:
    """One bias-corrected Adam update, in place.

    Updates every parameter in ``names`` (default: all trainable ones).
    Gradients are read, never cleared.
    """
    if names is None:
        names = params.trainable()
    for n in names:
        if params[n].grad is None:
            raise UninitializedGradientError(f"parameter {n!r} has no gradient")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for n in names:
        p = params[n]
        g = p.grad
        m = state.m.get(n)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[n] = np.zeros_like(p.data)
        v = state.v[n]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[n], state.v[n] = m, v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_grad_norm(params, max_norm: float, names=None) -> float:
    """Scale grads so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    if names is None:
        names = params.trainable()
    grads = [params[n].grad for n in names if params[n].grad is not None]
    norm = float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads)))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for n in names:
            if params[n].grad is not None:
                params[n].grad = params[n].grad * scale
    return norm
