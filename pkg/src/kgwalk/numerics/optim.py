from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """Bias-corrected Adam update applied in place to ``params[name].data``.

    Parameters without an entry in ``grads`` are treated as having zero gradient.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)


def clip_by_global_norm(grads: dict, max_norm: float | None):
    """Scale all gradients jointly so their global L2 norm is at most ``max_norm``.

    Returns the clipped dict and the norm before clipping.
    """
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm is None or max_norm <= 0 or norm <= max_norm:
        return grads, norm
    k = max_norm / (norm + 1e-12)
    return {name: g * k for name, g in grads.items()}, norm
