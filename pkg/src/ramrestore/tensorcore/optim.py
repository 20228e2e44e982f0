"""Adam with bias correction and the cosine learning-rate schedule."""

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import OutOfRangeStep, ShapeMismatch


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr):
    """Apply one Adam update in place.

    ``params`` maps names to Tensors, ``grads`` maps a subset of those names to
    gradient arrays (or Tensors). Parameters without a gradient entry are left
    untouched, which is how frozen layers stay fixed.
    """
    for name, g in grads.items():
        g = getattr(g, "data", g)
        p = params[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: grad {g.shape} vs param {p.shape}")
        m = state.m.get(name)
        if m is not None and m.shape != p.shape:
            raise ShapeMismatch(f"{name}: moment {m.shape} vs param {p.shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        g = np.asarray(getattr(g, "data", g), dtype=np.float64)
        p = params[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros(p.shape)
            v = np.zeros(p.shape)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def cosine_lr(step, total, lr_max, lr_min):
    if total < 1 or not 0 <= step <= total:
        raise OutOfRangeStep(f"step {step} outside [0, {total}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total))
