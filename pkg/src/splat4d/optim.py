"""Adam with per-group learning rates and sparse (zero-gradient) skipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import NonFiniteGradient


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)  # per-element update counts
    step: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: dict,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update, in place.

    Elements whose gradient is exactly zero are skipped entirely (parameter
    and moments untouched), so bias correction runs on per-element counts.
    Every gradient is checked before anything is modified.
    """
    for name, g in grads.items():
        if name in params and not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
    state.step += 1
    for name, g in grads.items():
        if name not in params:
            continue
        p = params[name]
        g = np.asarray(g, dtype=np.float64).reshape(p.shape)
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
            state.counts[name] = np.zeros(p.shape, dtype=np.int64)
        live = g != 0.0
        if not live.any():
            continue
        m, v, n = state.m[name], state.v[name], state.counts[name]
        n[live] += 1
        m[live] = beta1 * m[live] + (1.0 - beta1) * g[live]
        v[live] = beta2 * v[live] + (1.0 - beta2) * g[live] ** 2
        t = n[live]
        m_hat = m[live] / (1.0 - beta1**t)
        v_hat = v[live] / (1.0 - beta2**t)
        p[live] -= lr[name] * m_hat / (np.sqrt(v_hat) + eps)
    return params, state
