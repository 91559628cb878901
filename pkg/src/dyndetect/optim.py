"""AdamW with decoupled weight decay, operating on dicts of numpy arrays."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from dyndetect.errors import InvalidArgumentError


@dataclass
class AdamWConfig:
    learning_rate: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    config: AdamWConfig,
    lr_scales: dict[str, float] | None = None,
):
    """One in-place AdamW update; returns ``(params, state)``.

    ``theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)``

    ``lr_scales`` optionally multiplies ``lr`` per parameter (missing keys: 1).
    """
    if state.step < 0:
        raise InvalidArgumentError("optimizer step counter must be >= 0")
    if set(params) != set(grads):
        raise InvalidArgumentError("params and grads must have the same keys")
    for name, g in grads.items():
        if np.shape(g) != np.shape(params[name]):
            raise InvalidArgumentError(f"gradient shape mismatch for {name}")
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {name}")

    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    wd = config.weight_decay
    lr_scales = lr_scales or {}
    for name, p in params.items():
        lr = config.learning_rate * lr_scales.get(name, 1.0)
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + config.eps)
        if wd:
            update = update + wd * p
        p -= lr * update
    return params, state


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


def fan_in_scales(params: dict[str, np.ndarray]) -> dict[str, float]:
    """``1 / sqrt(fan_in)`` for every weight matrix (2-d, or 1-d head vector named ``*.w``)."""
    scales = {}
    for name, p in params.items():
        if p.ndim == 2:
            scales[name] = 1.0 / math.sqrt(p.shape[1])
        elif name.endswith(".w"):
            scales[name] = 1.0 / math.sqrt(p.shape[0])
    return scales
