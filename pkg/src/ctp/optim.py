"""Adam with decoupled weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError
from .layers import ParamSet


@dataclass
class AdamState:
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParamSet, state: AdamState, grads: dict | None = None) -> AdamState:
    """Update ``params`` in place and return ``state`` with the step advanced.

    ``grads`` defaults to each parameter's accumulated ``.grad``.  Weight
    decay is applied as ``p -= lr * wd * p`` before the Adam move.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name in params:
        p = params[name]
        g = p.grad if grads is None else grads[name]
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: gradient for {name!r} has shape {g.shape}, parameter {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[name]
            if m.shape != p.data.shape:
                raise ShapeError(f"adam_step: moment shape {m.shape} != parameter {p.data.shape} for {name!r}")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        data = p.data
        if state.weight_decay:
            data = data - state.lr * state.weight_decay * data
        data = data - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data = data.astype(p.data.dtype)
    return state
