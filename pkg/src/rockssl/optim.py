"""Adam (with bias correction) and plain SGD over dicts of numpy arrays."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NegativeLearningRate, ShapeMismatch


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def _check(lr, params, grads):
    if not lr > 0:
        raise NegativeLearningRate(f"learning rate must be positive, got {lr}")
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ShapeMismatch(f"{name}: gradient {grads[name].shape} vs parameter {p.shape}")


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One in-place Adam update of ``params``; advances ``state.t``."""
    _check(state.lr, params, grads)
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= (state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(p.dtype)


@dataclass
class SGDState:
    lr: float = 1e-3
    t: int = 0


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: SGDState) -> None:
    _check(state.lr, params, grads)
    state.t += 1
    for name, p in params.items():
        p -= (state.lr * grads[name]).astype(p.dtype)


def make_optimizer(kind: str, lr: float):
    """Return ``(state, step_fn)`` for ``"adam"`` or ``"sgd"``."""
    if not lr > 0:
        raise NegativeLearningRate(f"learning rate must be positive, got {lr}")
    if kind == "adam":
        return AdamState(lr=lr), adam_step
    if kind == "sgd":
        return SGDState(lr=lr), sgd_step
    raise ValueError(f"unknown optimizer {kind!r}")
