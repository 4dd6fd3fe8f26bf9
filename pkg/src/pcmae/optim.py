"""AdamW with decoupled weight decay and the cosine learning-rate schedule."""
from __future__ import annotations

import math

import numpy as np

from .config import TrainConfig
from .tensor import ParamStore


class DivergenceError(RuntimeError):
    """Training hit a non-finite loss or gradient."""


def cosine_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """lr_min + 0.5*(lr_max - lr_min)*(1 + cos(pi * step / total_steps))."""
    if total_steps <= 0:
        return cfg.lr_max
    frac = step / total_steps
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * frac))


class AdamWState:
    """First/second moment buffers per trainable parameter plus a step count."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: int = 0


def adamw_step(store: ParamStore, grads: dict[str, np.ndarray], state: AdamWState,
               lr: float, cfg: TrainConfig) -> AdamWState:
    """One decoupled-weight-decay update over the trainable entries.

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta).
    Frozen entries are untouched; non-finite gradients raise "divergence".
    """
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name in store.trainable_names():
        if name not in grads:
            continue
        g = grads[name]
        if not np.isfinite(g).all():
            raise DivergenceError("divergence")
        p = store[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data, dtype=np.float64)
            state.v[name] = np.zeros_like(p.data, dtype=np.float64)
        m = state.m[name]
        v = state.v[name]
        g64 = g.astype(np.float64)
        m *= b1
        m += (1.0 - b1) * g64
        v *= b2
        v += (1.0 - b2) * g64 * g64
        m_hat = m / bc1
        v_hat = v / bc2
        update = m_hat / (np.sqrt(v_hat) + cfg.eps) + cfg.weight_decay * p.data.astype(np.float64)
        p.data = (p.data.astype(np.float64) - lr * update).astype(p.data.dtype)
    return state
