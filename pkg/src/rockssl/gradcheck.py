"""Central finite-difference check of reverse-mode gradients."""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward
from .errors import InvalidEpsilon


def relative_error(analytic, numeric, floor: float = 1e-8):
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(fn: Callable[[dict[str, Tensor]], Tensor], params: Mapping[str, np.ndarray],
               fd_epsilon: float = 1e-5, coords_per_tensor: int = 200, seed: int = 0,
               report: dict | None = None) -> float:
    """Largest relative error between backprop and central differences.

    ``fn`` maps a dict of leaf tensors to a scalar loss. Tensors bigger than
    ``coords_per_tensor`` are checked on that many randomly chosen
    coordinates. Run it on float64 parameters; float32 cannot reach the
    tolerances this is meant for. If ``report`` is given it is filled with the
    worst error per tensor.
    """
    if not fd_epsilon > 0:
        raise InvalidEpsilon(f"fd_epsilon must be positive, got {fd_epsilon}")
    arrays = {k: np.array(v, copy=True) for k, v in params.items()}
    leaves = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
    grads = backward(fn(leaves), leaves)

    def value() -> float:
        return float(fn({k: Tensor(v) for k, v in arrays.items()}).data)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, arr in arrays.items():
        flat = arr.reshape(-1)
        if flat.size <= coords_per_tensor:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=coords_per_tensor, replace=False)
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + fd_epsilon
            up = value()
            flat[i] = orig - fd_epsilon
            down = value()
            flat[i] = orig
            numeric[j] = (up - down) / (2.0 * fd_epsilon)
        err = float(relative_error(grads[name].reshape(-1)[idx], numeric).max(initial=0.0))
        if report is not None:
            report[name] = err
        worst = max(worst, err)
    return worst


class KinkGuard:
    """ReLU that keeps every pre-activation at least ``margin`` away from 0.

    The first forward pass records, per ReLU call, a constant offset that moves
    any pre-activation within ``margin`` of the kink out to +/-``margin``.
    Later passes replay the same offsets in the same call order. The offsets
    are constants, so the guarded network is still an ordinary composite
    function, but a finite-difference step can no longer cross a kink.
    Call :meth:`reset` before each forward pass.
    """

    def __init__(self, margin: float = 1e-3):
        self.margin = margin
        self.offsets: list[np.ndarray] = []
        self.calls = 0

    def reset(self):
        self.calls = 0

    def __call__(self, x: Tensor) -> Tensor:
        if self.calls == len(self.offsets):
            z = x.data
            near = np.abs(z) < self.margin
            push = np.where(z >= 0, self.margin, -self.margin) - z
            self.offsets.append(np.where(near, push, 0.0).astype(z.dtype))
        off = self.offsets[self.calls]
        self.calls += 1
        return ad.relu(ad.add(x, Tensor(off)))
